//! Shallow fully connected decoders with hand-written forward and backward
//! passes.
//!
//! Hidden layers use ReLU, the output layer is linear. All parameters of one
//! network live in a single flat buffer (`[W0, b0, W1, b1, ...]`, weights
//! row-major `out x in`) so optimizers, importance weights and snapshots can
//! treat a decoder as one tensor.
//!
//! Besides the usual backward pass there is a *tangent* pass: for a fixed
//! input direction `t` it evaluates the directional derivative `∂f/∂z · t`
//! with the activation pattern of a recorded forward pass, and back-propagates
//! parameter gradients of that quantity. Because ReLU networks are piecewise
//! linear, this is exactly the parameter gradient of a spatial-gradient
//! penalty such as the Eikonal term.

use rand::Rng;

use crate::error::{Error, Result};
use crate::util::stream_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
    version: u64,
}

/// Activations recorded by a forward pass over one batch.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    batch: usize,
    version: u64,
    dims: Vec<usize>,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// ReLU on/off state of every hidden unit, batch-major per layer.
    pub fn active_units(&self) -> Vec<bool> {
        let n = self.acts.len();
        if n < 3 {
            return Vec::new();
        }
        self.acts[1..n - 1].iter().flatten().map(|&v| v > 0.0).collect()
    }
}

/// Directional activations of a tangent pass.
#[derive(Clone, Debug, Default)]
pub struct TangentTrace {
    acts: Vec<Vec<f64>>,
}

impl TangentTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn layout(dims: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(dims.len().saturating_sub(1));
    let mut n = 0;
    for w in dims.windows(2) {
        offsets.push(n);
        n += w[0] * w[1] + w[1];
    }
    (offsets, n)
}

impl Mlp {
    /// Fan-in scaled uniform initialization (`U(-sqrt(6/in), sqrt(6/in))`),
    /// zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        let mut mlp = Mlp::zeros(dims)?;
        for l in 0..mlp.num_layers() {
            let (rows, cols) = mlp.layer_shape(l);
            let bound = (6.0 / cols as f64).sqrt();
            let mut rng = stream_rng(seed, 0x4D_4C50, l as u64);
            let off = mlp.offsets[l];
            for w in &mut mlp.params[off..off + rows * cols] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("invalid layer widths {dims:?}")));
        }
        let (offsets, n) = layout(dims);
        Ok(Mlp {
            dims: dims.to_vec(),
            params: vec![0.0; n],
            offsets,
            version: 0,
        })
    }

    /// Build from explicit `(rows, cols, weights, biases)` layers.
    pub fn from_layers(layers: &[(usize, usize, Vec<f64>, Vec<f64>)]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("decoder needs at least one layer"));
        }
        let mut dims = vec![layers[0].1];
        for (i, (rows, cols, w, b)) in layers.iter().enumerate() {
            if *cols != *dims.last().unwrap() {
                return Err(Error::contract(format!(
                    "layer {i} expects {cols} inputs but previous layer has {} outputs",
                    dims.last().unwrap()
                )));
            }
            if w.len() != rows * cols || b.len() != *rows {
                return Err(Error::contract(format!("layer {i} buffer sizes do not match {rows}x{cols}")));
            }
            dims.push(*rows);
        }
        let mut mlp = Mlp::zeros(&dims)?;
        for (l, (rows, cols, w, b)) in layers.iter().enumerate() {
            let off = mlp.offsets[l];
            mlp.params[off..off + rows * cols].copy_from_slice(w);
            mlp.params[off + rows * cols..off + rows * cols + rows].copy_from_slice(b);
        }
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn hidden_layers(&self) -> usize {
        self.num_layers() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(rows, cols)` of layer `l`'s weight matrix.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.dims[l + 1], self.dims[l])
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        let (r, c) = self.layer_shape(l);
        &self.params[self.offsets[l]..self.offsets[l] + r * c]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let (r, c) = self.layer_shape(l);
        let off = self.offsets[l] + r * c;
        &self.params[off..off + r]
    }

    /// Offset of layer `l`'s weights in the flat parameter buffer.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.offsets[l]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates outstanding traces.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.version != self.version || trace.dims != self.dims {
            return Err(Error::contract("stale forward trace: parameters changed since the forward pass"));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        self.forward_into(input, batch, &mut trace)?;
        Ok((trace.output().to_vec(), trace))
    }

    /// Forward pass reusing the buffers of `trace`.
    pub fn forward_into(&self, input: &[f64], batch: usize, trace: &mut ForwardTrace) -> Result<()> {
        if input.len() != batch * self.input_dim() {
            return Err(Error::contract(format!(
                "input has {} values, expected {batch} x {}",
                input.len(),
                self.input_dim()
            )));
        }
        let n = self.dims.len();
        trace.acts.resize_with(n, Vec::new);
        trace.batch = batch;
        trace.version = self.version;
        trace.dims.clone_from(&self.dims);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (rows, cols) = self.layer_shape(l);
            let w = self.weight(l);
            let b = self.bias(l);
            let (head, tail) = trace.acts.split_at_mut(l + 1);
            let x = &head[l];
            let y = &mut tail[0];
            y.clear();
            y.resize(batch * rows, 0.0);
            for s in 0..batch {
                let xs = &x[s * cols..(s + 1) * cols];
                let ys = &mut y[s * rows..(s + 1) * rows];
                for r in 0..rows {
                    let wr = &w[r * cols..(r + 1) * cols];
                    let mut acc = b[r];
                    for (a, v) in wr.iter().zip(xs) {
                        acc += a * v;
                    }
                    ys[r] = if l < last && acc <= 0.0 { 0.0 } else { acc };
                }
            }
        }
        Ok(())
    }

    /// Shared reverse sweep. `inputs(l)` supplies the activations entering
    /// layer `l`; bias gradients are only accumulated when `with_bias`.
    #[allow(clippy::too_many_arguments)]
    fn reverse<'a>(
        &self,
        trace: &ForwardTrace,
        layer_inputs: &dyn Fn(usize) -> &'a [f64],
        d_out: &[f64],
        mut grads: Option<&mut [f64]>,
        with_bias: bool,
        d_input: Option<&mut [f64]>,
    ) -> Result<()>
    where
        Self: 'a,
    {
        let batch = trace.batch;
        if d_out.len() != batch * self.output_dim() {
            return Err(Error::contract("output gradient has the wrong shape"));
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::contract("gradient buffer has the wrong length"));
            }
        }
        let mut delta = d_out.to_vec();
        let mut next = Vec::new();
        for l in (0..self.num_layers()).rev() {
            let (rows, cols) = self.layer_shape(l);
            let w = self.weight(l);
            let x = layer_inputs(l);
            if let Some(g) = grads.as_deref_mut() {
                let off = self.offsets[l];
                let (gw, gb) = g[off..off + rows * cols + rows].split_at_mut(rows * cols);
                for s in 0..batch {
                    let ds = &delta[s * rows..(s + 1) * rows];
                    let xs = &x[s * cols..(s + 1) * cols];
                    for r in 0..rows {
                        let d = ds[r];
                        if d == 0.0 {
                            continue;
                        }
                        let gr = &mut gw[r * cols..(r + 1) * cols];
                        for (gv, xv) in gr.iter_mut().zip(xs) {
                            *gv += d * xv;
                        }
                        if with_bias {
                            gb[r] += d;
                        }
                    }
                }
            }
            if l == 0 && d_input.is_none() {
                break;
            }
            next.clear();
            next.resize(batch * cols, 0.0);
            for s in 0..batch {
                let ds = &delta[s * rows..(s + 1) * rows];
                let ns = &mut next[s * cols..(s + 1) * cols];
                for r in 0..rows {
                    let d = ds[r];
                    if d == 0.0 {
                        continue;
                    }
                    for (nv, wv) in ns.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                        *nv += d * wv;
                    }
                }
            }
            if l > 0 {
                // ReLU mask of the layer feeding this one.
                let mask = &trace.acts[l];
                for (nv, a) in next.iter_mut().zip(mask) {
                    if *a <= 0.0 {
                        *nv = 0.0;
                    }
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
        if let Some(di) = d_input {
            if di.len() != delta.len() {
                return Err(Error::contract("input gradient buffer has the wrong length"));
            }
            di.copy_from_slice(&delta);
        }
        Ok(())
    }

    /// Parameter gradients (fresh buffer) and input gradients.
    pub fn backward(&self, trace: &ForwardTrace, d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let mut d_in = vec![0.0; trace.batch * self.input_dim()];
        self.backward_into(trace, d_out, &mut grads, Some(&mut d_in))?;
        Ok((grads, d_in))
    }

    /// Accumulate parameter gradients into `grads`; optionally write input
    /// gradients.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        d_out: &[f64],
        grads: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) -> Result<()> {
        self.check_trace(trace)?;
        self.reverse(trace, &|l| trace.acts[l].as_slice(), d_out, Some(grads), true, d_input)
    }

    /// Input gradients only.
    pub fn input_gradient(&self, trace: &ForwardTrace, d_out: &[f64], d_input: &mut [f64]) -> Result<()> {
        self.check_trace(trace)?;
        self.reverse(trace, &|l| trace.acts[l].as_slice(), d_out, None, false, Some(d_input))
    }

    /// Directional derivative of the outputs along `tangent` (batch x input),
    /// using the activation pattern recorded in `trace`.
    pub fn tangent_forward(&self, trace: &ForwardTrace, tangent: &[f64], out: &mut TangentTrace) -> Result<()> {
        self.check_trace(trace)?;
        let batch = trace.batch;
        if tangent.len() != batch * self.input_dim() {
            return Err(Error::contract("tangent has the wrong shape"));
        }
        let n = self.dims.len();
        out.acts.resize_with(n, Vec::new);
        out.acts[0].clear();
        out.acts[0].extend_from_slice(tangent);
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (rows, cols) = self.layer_shape(l);
            let w = self.weight(l);
            let mask = &trace.acts[l + 1];
            let (head, tail) = out.acts.split_at_mut(l + 1);
            let x = &head[l];
            let y = &mut tail[0];
            y.clear();
            y.resize(batch * rows, 0.0);
            for s in 0..batch {
                let xs = &x[s * cols..(s + 1) * cols];
                for r in 0..rows {
                    if l < last && mask[s * rows + r] <= 0.0 {
                        continue;
                    }
                    let wr = &w[r * cols..(r + 1) * cols];
                    let mut acc = 0.0;
                    for (a, v) in wr.iter().zip(xs) {
                        acc += a * v;
                    }
                    y[s * rows + r] = acc;
                }
            }
        }
        Ok(())
    }

    /// Accumulate parameter gradients of `Σ d_out · tangent_output`.
    pub fn tangent_backward(
        &self,
        trace: &ForwardTrace,
        tangent: &TangentTrace,
        d_out: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        self.check_trace(trace)?;
        if tangent.acts.len() != self.dims.len() {
            return Err(Error::contract("tangent trace does not match this decoder"));
        }
        self.reverse(trace, &|l| tangent.acts[l].as_slice(), d_out, Some(grads), false, None)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// `log(sum(exp(logits)))` with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Grow the accumulators (new parameters start with zero moments).
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }

    #[inline]
    fn update(&self, m: &mut f64, v: &mut f64, p: &mut f64, g: f64, c1: f64, c2: f64) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }
}

fn check_finite(name: &str, grads: &[f64]) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            term: name.to_string(),
            detail: format!("non-finite gradient at index {i}"),
        });
    }
    Ok(())
}

/// Dense Adam step with bias correction.
pub fn adam_step(name: &str, params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!("{name}: optimizer shapes do not match")));
    }
    check_finite(name, grads)?;
    state.step += 1;
    let (c1, c2) = state.corrections();
    let (mut ms, mut vs) = (std::mem::take(&mut state.m), std::mem::take(&mut state.v));
    for i in 0..params.len() {
        state.update(&mut ms[i], &mut vs[i], &mut params[i], grads[i], c1, c2);
    }
    state.m = ms;
    state.v = vs;
    Ok(())
}

/// Adam step restricted to the listed rows of a row-major `rows x dim` table.
/// Rows not listed keep both their values and their moments.
pub fn adam_step_rows(
    name: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    rows: &[u32],
    dim: usize,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!("{name}: optimizer shapes do not match")));
    }
    for &r in rows {
        check_finite(name, &grads[r as usize * dim..(r as usize + 1) * dim])?;
    }
    state.step += 1;
    let (c1, c2) = state.corrections();
    let (mut ms, mut vs) = (std::mem::take(&mut state.m), std::mem::take(&mut state.v));
    for &r in rows {
        for i in r as usize * dim..(r as usize + 1) * dim {
            state.update(&mut ms[i], &mut vs[i], &mut params[i], grads[i], c1, c2);
        }
    }
    state.m = ms;
    state.v = vs;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_output_bias() {
        let layers = vec![
            (4, 3, vec![0.0; 12], vec![0.5; 4]),
            (2, 4, vec![0.0; 8], vec![1.5, -2.0]),
        ];
        let m = Mlp::from_layers(&layers).unwrap();
        let (y, _) = m.forward(&[1.0, -4.0, 9.0, 0.1, 0.2, 0.3], 2).unwrap();
        assert_eq!(y, vec![1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn single_linear_layer_matches_hand_product() {
        let m = Mlp::from_layers(&[(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0], vec![0.1, -0.2])]).unwrap();
        let (y, trace) = m.forward(&[1.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(y, vec![1.0 + 2.0 + 6.0 + 0.1, -1.0 + 0.5 - 0.2]);
        let (g, din) = m.backward(&trace, &[2.0, -1.0]).unwrap();
        // dW = dy x^T
        assert_eq!(&g[..6], &[2.0, 2.0, 4.0, -1.0, -1.0, -2.0]);
        assert_eq!(&g[6..], &[2.0, -1.0]);
        assert_eq!(din, vec![2.0 + 1.0, 4.0 - 0.5, 6.0]);
    }

    #[test]
    fn dead_relu_unit_gets_no_gradient() {
        // hidden unit 0 has negative pre-activation for this input
        let m = Mlp::from_layers(&[
            (2, 1, vec![-1.0, 1.0], vec![0.0, 0.0]),
            (1, 2, vec![3.0, 4.0], vec![0.0]),
        ])
        .unwrap();
        let (_, trace) = m.forward(&[2.0], 1).unwrap();
        let (g, _) = m.backward(&trace, &[1.0]).unwrap();
        assert_eq!(g[0], 0.0); // W0[0,0]
        assert_eq!(g[2], 0.0); // b0[0]
        assert_eq!(g[1], 4.0 * 2.0);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut m = Mlp::new(&[3, 4, 1], 7).unwrap();
        let (_, trace) = m.forward(&[0.1, 0.2, 0.3], 1).unwrap();
        m.params_mut()[0] += 1.0;
        assert!(matches!(m.backward(&trace, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = Mlp::new(&[3, 4, 1], 7).unwrap();
        assert!(m.forward(&[0.0; 4], 1).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![0.3, -0.2];
        let mut st = AdamState::new(AdamConfig::default(), 2);
        adam_step("w", &mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![0.3, -0.2]);
    }

    #[test]
    fn adam_single_step_without_momentum_is_rms_sgd() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let mut p = vec![1.0, 1.0];
        let mut st = AdamState::new(cfg, 2);
        adam_step("w", &mut p, &[0.5, -4.0], &mut st).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (1.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_descends() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(AdamConfig::default(), 1);
        for _ in 0..50 {
            adam_step("w", &mut p, &[2.0], &mut st).unwrap();
        }
        assert!(p[0] < -0.04);
    }

    #[test]
    fn adam_rejects_non_finite_and_names_tensor() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(AdamConfig::default(), 1);
        let err = adam_step("gnf", &mut p, &[f64::NAN], &mut st).unwrap_err();
        assert!(err.to_string().contains("gnf"));
    }

    #[test]
    fn sparse_rows_leave_other_rows_alone() {
        let mut p = vec![1.0; 6];
        let mut st = AdamState::new(AdamConfig::default(), 6);
        let g = vec![1.0; 6];
        adam_step_rows("f", &mut p, &g, &mut st, &[1], 2).unwrap();
        assert_eq!(&p[..2], &[1.0, 1.0]);
        assert!(p[2] < 1.0 && p[3] < 1.0);
        assert_eq!(&p[4..], &[1.0, 1.0]);
    }
}
