//! The neural map: octree features plus geometry, semantic and optional
//! instance decoders, with batched inference helpers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{ForwardTrace, Mlp};
use crate::octree::{FeatureMerge, FeatureTable, GridConfig, OctreeFeatureGrid, Stencil};
use crate::util::{argmax, mix64, Vec3};

/// Points per inference chunk; fixed so results never depend on threading.
pub const CHUNK: usize = 512;

/// The four mapping modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    BatchSemantic,
    BatchPanoptic,
    IncrementalSemantic,
    IncrementalPanoptic,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::BatchSemantic,
        Mode::BatchPanoptic,
        Mode::IncrementalSemantic,
        Mode::IncrementalPanoptic,
    ];

    pub fn is_incremental(self) -> bool {
        matches!(self, Mode::IncrementalSemantic | Mode::IncrementalPanoptic)
    }

    pub fn is_panoptic(self) -> bool {
        matches!(self, Mode::BatchPanoptic | Mode::IncrementalPanoptic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BatchSemantic => "batch-semantic",
            Mode::BatchPanoptic => "batch-panoptic",
            Mode::IncrementalSemantic => "incremental-semantic",
            Mode::IncrementalPanoptic => "incremental-panoptic",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Number of class logits, including the unlabeled class 0.
    pub classes: usize,
    /// Largest dense instance id; the instance head has `max_instances + 1` slots.
    pub max_instances: usize,
    /// Class ids that carry instances.
    pub things: Vec<u16>,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 32,
            hidden_layers: 2,
            classes: 20,
            max_instances: 64,
            things: (1..=8).collect(),
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden == 0 {
            errs.push("decoder hidden width must be positive".to_string());
        }
        if self.classes < 2 {
            errs.push(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.max_instances < 1 {
            errs.push("max_instances must be at least 1".to_string());
        }
        for &t in &self.things {
            if t as usize >= self.classes || t == 0 {
                errs.push(format!("thing class {t} outside [1, {})", self.classes));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        d.push(output);
        d
    }
}

#[derive(Clone, Debug)]
pub struct NeuralMap {
    pub grid: OctreeFeatureGrid,
    pub gnf: Mlp,
    pub snf: Mlp,
    pub instance: Option<Mlp>,
    pub things: Vec<u16>,
}

/// Scratch buffers for chunked decoding.
#[derive(Default)]
struct Scratch {
    stencil: Stencil,
    input: Vec<f64>,
    trace: ForwardTrace,
}

impl NeuralMap {
    pub fn new(grid: GridConfig, decoders: &DecoderConfig, panoptic: bool) -> Result<Self> {
        decoders.validate()?;
        let grid = OctreeFeatureGrid::new(grid)?;
        let geo_in = grid.input_dim(FeatureTable::Geometry);
        let sem_in = grid.input_dim(FeatureTable::Semantic);
        let seed = decoders.seed;
        let gnf = Mlp::new(&decoders.dims(geo_in, 1), mix64(seed ^ 0x474E))?;
        let (snf, instance) = if panoptic {
            if grid.config().merge != FeatureMerge::Concat || sem_in % 3 != 0 {
                return Err(Error::config(
                    "panoptic mode needs concatenated semantic features whose length is divisible by 3",
                ));
            }
            let split = sem_in / 3;
            let snf = Mlp::new(&decoders.dims(split, decoders.classes), mix64(seed ^ 0x534E))?;
            let inst = Mlp::new(&decoders.dims(sem_in - split, decoders.max_instances + 1), mix64(seed ^ 0x504E))?;
            (snf, Some(inst))
        } else {
            (Mlp::new(&decoders.dims(sem_in, decoders.classes), mix64(seed ^ 0x534E))?, None)
        };
        Ok(NeuralMap {
            grid,
            gnf,
            snf,
            instance,
            things: decoders.things.clone(),
        })
    }

    /// Assemble a map from parts, checking that the decoder shapes fit the grid.
    pub fn from_parts(grid: OctreeFeatureGrid, gnf: Mlp, snf: Mlp, instance: Option<Mlp>, things: Vec<u16>) -> Result<Self> {
        let map = NeuralMap {
            grid,
            gnf,
            snf,
            instance,
            things,
        };
        map.check_shapes()?;
        Ok(map)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let geo_in = self.grid.input_dim(FeatureTable::Geometry);
        let sem_in = self.grid.input_dim(FeatureTable::Semantic);
        if self.gnf.input_dim() != geo_in || self.gnf.output_dim() != 1 {
            return Err(Error::contract("geometry decoder does not match the feature grid"));
        }
        let class_in = self.class_input_dim();
        if self.snf.input_dim() != class_in {
            return Err(Error::contract("semantic decoder does not match the feature grid"));
        }
        if let Some(inst) = &self.instance {
            if inst.input_dim() != sem_in - class_in {
                return Err(Error::contract("instance decoder does not match the feature grid"));
            }
        }
        Ok(())
    }

    pub fn is_panoptic(&self) -> bool {
        self.instance.is_some()
    }

    pub fn classes(&self) -> usize {
        self.snf.output_dim()
    }

    pub fn instance_slots(&self) -> usize {
        self.instance.as_ref().map_or(0, |m| m.output_dim())
    }

    /// Leading semantic coordinates fed to the class head.
    pub fn class_input_dim(&self) -> usize {
        let sem_in = self.grid.input_dim(FeatureTable::Semantic);
        if self.instance.is_some() {
            sem_in / 3
        } else {
            sem_in
        }
    }

    pub fn is_thing(&self, class: u16) -> bool {
        self.things.contains(&class)
    }

    /// SDF at every point; `None` outside the mapped region.
    pub fn sdf_batch(&self, points: &[Vec3]) -> Vec<Option<f64>> {
        points
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut s = Scratch::default();
                self.sdf_chunk(chunk, &mut s)
            })
            .collect::<Vec<_>>()
            .concat()
    }

    fn sdf_chunk(&self, chunk: &[Vec3], s: &mut Scratch) -> Vec<Option<f64>> {
        let dim = self.gnf.input_dim();
        let mut present = Vec::with_capacity(chunk.len());
        s.input.clear();
        let mut row = vec![0.0; dim];
        for &x in chunk {
            let ok = self.grid.stencil_into(x, &mut s.stencil);
            present.push(ok);
            if ok {
                self.grid.assemble(&s.stencil, FeatureTable::Geometry, &mut row);
                s.input.extend_from_slice(&row);
            }
        }
        let n = s.input.len() / dim;
        let mut out = Vec::with_capacity(chunk.len());
        if n > 0 {
            self.gnf.forward_into(&s.input, n, &mut s.trace).expect("input assembled to decoder width");
        }
        let y = s.trace.output();
        let mut k = 0;
        for ok in present {
            if ok {
                out.push(Some(y[k]));
                k += 1;
            } else {
                out.push(None);
            }
        }
        out
    }

    pub fn sdf(&self, x: Vec3) -> Option<f64> {
        self.sdf_chunk(&[x], &mut Scratch::default())[0]
    }

    /// SDF value and analytic spatial gradient at `x`.
    pub fn sdf_gradient(&self, x: Vec3) -> Option<(f64, Vec3)> {
        let st = self.grid.stencil(x)?;
        let dim = self.gnf.input_dim();
        let mut z = vec![0.0; dim];
        let mut jac = vec![[0.0; 3]; dim];
        self.grid.assemble(&st, FeatureTable::Geometry, &mut z);
        self.grid.assemble_jacobian(&st, FeatureTable::Geometry, &mut jac);
        let (y, trace) = self.gnf.forward(&z, 1).ok()?;
        let mut g = vec![0.0; dim];
        self.gnf.input_gradient(&trace, &[1.0], &mut g).ok()?;
        let mut grad = [0.0; 3];
        for (j, gj) in jac.iter().zip(&g) {
            for a in 0..3 {
                grad[a] += j[a] * gj;
            }
        }
        Some((y[0], grad))
    }

    /// Class and instance label at every point; `None` outside the map.
    pub fn labels_batch(&self, points: &[Vec3]) -> Vec<Option<(u16, u32)>> {
        points
            .par_chunks(CHUNK)
            .map(|chunk| self.labels_chunk(chunk))
            .collect::<Vec<_>>()
            .concat()
    }

    fn labels_chunk(&self, chunk: &[Vec3]) -> Vec<Option<(u16, u32)>> {
        let sem_in = self.grid.input_dim(FeatureTable::Semantic);
        let split = self.class_input_dim();
        let mut stencil = Stencil::default();
        let mut row = vec![0.0; sem_in];
        let mut class_in = Vec::with_capacity(chunk.len() * split);
        let mut inst_in = Vec::with_capacity(chunk.len() * (sem_in - split));
        let mut present = Vec::with_capacity(chunk.len());
        for &x in chunk {
            let ok = self.grid.stencil_into(x, &mut stencil);
            present.push(ok);
            if ok {
                self.grid.assemble(&stencil, FeatureTable::Semantic, &mut row);
                class_in.extend_from_slice(&row[..split]);
                inst_in.extend_from_slice(&row[split..]);
            }
        }
        let n = present.iter().filter(|&&p| p).count();
        let mut out = Vec::with_capacity(chunk.len());
        if n == 0 {
            out.resize(chunk.len(), None);
            return out;
        }
        let (logits, _) = self.snf.forward(&class_in, n).expect("class input width");
        let inst_logits = self
            .instance
            .as_ref()
            .map(|m| m.forward(&inst_in, n).expect("instance input width").0);
        let c = self.classes();
        let q = self.instance_slots();
        let mut k = 0;
        for ok in present {
            if !ok {
                out.push(None);
                continue;
            }
            let class = argmax(&logits[k * c..(k + 1) * c]) as u16;
            let inst = match &inst_logits {
                Some(l) if self.is_thing(class) => argmax(&l[k * q..(k + 1) * q]) as u32,
                _ => 0,
            };
            out.push(Some((class, inst)));
            k += 1;
        }
        out
    }

    /// All trainable tensors in a fixed order: geometry features, semantic
    /// features, geometry decoder, semantic decoder, instance decoder.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = vec![
            self.grid.features(FeatureTable::Geometry),
            self.grid.features(FeatureTable::Semantic),
            self.gnf.params(),
            self.snf.params(),
        ];
        if let Some(i) = &self.instance {
            t.push(i.params());
        }
        t
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
