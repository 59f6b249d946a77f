//! Parameter containers, layer builders and optimizers.

use crate::graph::{Tape, Var};
use crate::rng::stream;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::HashMap;

/// One named tensor of trainable parameters.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// An independently addressable set of parameters. The training phases of the
/// alternating loop update whole groups and nothing else, so group membership
/// is the unit of isolation.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Param>,
}

impl ParamGroup {
    pub fn new(name: &str) -> Self {
        ParamGroup { name: name.to_string(), params: Vec::new() }
    }

    pub fn push(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        self.params.push(Param { name: format!("{}.{}", self.name, name), value });
        self.params.len() - 1
    }

    /// Registers every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Registers every tensor as a constant (frozen) leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bitwise fingerprint, used by tests to prove a group did not move.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for v in p.value.iter() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn snapshot(&self) -> Vec<ArrayD<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Reptile-style outer step: value <- start + beta * (value - start).
    pub fn interpolate_from(&mut self, start: &[ArrayD<f64>], beta: f64) {
        for (p, s) in self.params.iter_mut().zip(start) {
            p.value.zip_mut_with(s, |v, s| *v = s + beta * (*v - s));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_tensor(shape: &[usize], fan_in: usize, seed: u64, tag: &str, index: u64) -> ArrayD<f64> {
    let mut rng = stream(seed, tag, index);
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    a
}

/// 3x3 (or kxk) convolution layer; parameters live in a [`ParamGroup`], the
/// struct only remembers their indices.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        group: &mut ParamGroup,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        seed: u64,
        index: u64,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = group.push(
            &format!("{name}.w"),
            init_tensor(&[cout, cin, k, k], fan_in, seed, &format!("{}/{}", group.name, name), index),
        );
        // nonzero bias init keeps rectifier pre-activations off the exact
        // kink for all-zero input patches
        let b = group.push(
            &format!("{name}.b"),
            init_tensor(&[cout], fan_in, seed, &format!("{}/{}.b", group.name, name), index),
        );
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        tape.conv2d(x, vars[self.w], vars[self.b], self.stride, self.pad)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new(
        group: &mut ParamGroup,
        name: &str,
        din: usize,
        dout: usize,
        seed: u64,
        index: u64,
    ) -> Self {
        let w = group.push(
            &format!("{name}.w"),
            init_tensor(&[din, dout], din, seed, &format!("{}/{}", group.name, name), index),
        );
        let b = group.push(
            &format!("{name}.b"),
            init_tensor(&[dout], din, seed, &format!("{}/{}.b", group.name, name), index),
        );
        Dense { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, vars[self.w]);
        tape.add_bias2d(y, vars[self.b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

struct AdamSlot {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

/// Optimizer over named parameter groups. SGD is the plain gradient step the
/// update equations describe; Adam is available for desk-scale budgets.
/// `clip_norm` rescales each group's gradient to at most that Euclidean
/// norm before the update, which keeps occasional loss spikes (the KL term
/// early in training) from thrashing the encoder.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub clip_norm: Option<f64>,
    slots: HashMap<String, AdamSlot>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, clip_norm: None, slots: HashMap::new(), beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = (clip_norm > 0.0).then_some(clip_norm);
        self
    }

    /// Applies `value <- value - lr * direction_sign * grad` (SGD) or the
    /// Adam equivalent. Gradients not present on the tape are treated as zero.
    pub fn step(&mut self, group: &mut ParamGroup, tape: &Tape, vars: &[Var], lr: f64, direction_sign: f64) {
        let clip_scale = match self.clip_norm {
            None => 1.0,
            Some(clip) => {
                let mut sq = 0.0;
                for (idx, _) in group.params.iter().enumerate() {
                    if let Some(g) = tape.grad(vars[idx]) {
                        sq += g.iter().map(|v| v * v).sum::<f64>();
                    }
                }
                let norm = sq.sqrt();
                if norm > clip { clip / norm } else { 1.0 }
            }
        };
        for (idx, param) in group.params.iter_mut().enumerate() {
            let Some(grad) = tape.grad(vars[idx]) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    param.value.zip_mut_with(grad, |p, g| *p -= lr * direction_sign * clip_scale * g);
                }
                OptimizerKind::Adam => {
                    let slot = self.slots.entry(param.name.clone()).or_insert_with(|| AdamSlot {
                        m: ArrayD::zeros(param.value.raw_dim()),
                        v: ArrayD::zeros(param.value.raw_dim()),
                        t: 0,
                    });
                    slot.t += 1;
                    let b1 = self.beta1;
                    let b2 = self.beta2;
                    let bc1 = 1.0 - b1.powi(slot.t as i32);
                    let bc2 = 1.0 - b2.powi(slot.t as i32);
                    let ps = param.value.as_slice_mut().unwrap();
                    let ms = slot.m.as_slice_mut().unwrap();
                    let vs = slot.v.as_slice_mut().unwrap();
                    let gs = grad.as_slice().unwrap();
                    for i in 0..ps.len() {
                        let g = direction_sign * clip_scale * gs[i];
                        ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                        vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                        let mhat = ms[i] / bc1;
                        let vhat = vs[i] / bc2;
                        ps[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
