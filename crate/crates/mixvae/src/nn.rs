//! Parameter storage, residual MLPs, and the AMSGrad optimizer.
//!
//! Networks run in two modes: a tape forward for training (gradients flow
//! through [`crate::tape`]) and a plain forward for samplers and
//! evaluation. Both share the same parameter store and must agree exactly.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};

/// Residual-MLP shape. `hidden = 0` means no trunk: heads apply directly to
/// the input, giving an affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub blocks: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter matrices for one network.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.values[id.0].raw_dim(), value.raw_dim());
        self.values[id.0] = value;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Exact equality of all parameter values.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.iter().zip(other.values.iter()).all(|(a, b)| {
                a.raw_dim() == b.raw_dim() && a.iter().zip(b.iter()).all(|(x, y)| x == y)
            })
    }
}

/// Per-batch binding of store parameters to tape leaves, so gradients can
/// be read back by `ParamId` after the backward pass.
pub struct ParamBinding {
    vars: Vec<Option<Var>>,
}

impl ParamBinding {
    pub fn new(store: &ParamStore) -> Self {
        ParamBinding { vars: vec![None; store.len()] }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(store.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Collect (id, gradient) pairs for every bound parameter.
    pub fn grads(&self, tape: &Tape, grads: &crate::tape::Grads) -> Vec<(ParamId, Array2<f64>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), grads.of(tape, var))))
            .collect()
    }
}

/// Pre-activation residual MLP with named output heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub arch: ArchConfig,
    pub in_dim: usize,
    head_dims: Vec<usize>,
    w_in: Option<ParamIdSerde>,
    b_in: Option<ParamIdSerde>,
    blocks: Vec<[ParamIdSerde; 4]>,
    heads: Vec<[ParamIdSerde; 2]>,
}

// ParamId wrapper that serializes as a plain index.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ParamIdSerde(usize);

impl From<ParamId> for ParamIdSerde {
    fn from(id: ParamId) -> Self {
        ParamIdSerde(id.0)
    }
}

impl From<ParamIdSerde> for ParamId {
    fn from(id: ParamIdSerde) -> Self {
        ParamId(id.0)
    }
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl Mlp {
    /// Register a new MLP's parameters in `store`. Weights use fan-in-scaled
    /// uniform init, biases start at zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        arch: ArchConfig,
        heads: &[(&str, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w_in = None;
        let mut b_in = None;
        let mut blocks = Vec::new();
        let trunk_dim = if arch.hidden == 0 { in_dim } else { arch.hidden };
        if arch.hidden > 0 {
            w_in = Some(
                store
                    .add(format!("{prefix}.w_in"), fan_in_uniform(rng, in_dim, arch.hidden))
                    .into(),
            );
            b_in = Some(store.add(format!("{prefix}.b_in"), Array2::zeros((1, arch.hidden))).into());
            for b in 0..arch.blocks {
                let w1 = store.add(
                    format!("{prefix}.block{b}.w1"),
                    fan_in_uniform(rng, arch.hidden, arch.hidden),
                );
                let b1 = store.add(format!("{prefix}.block{b}.b1"), Array2::zeros((1, arch.hidden)));
                let w2 = store.add(
                    format!("{prefix}.block{b}.w2"),
                    fan_in_uniform(rng, arch.hidden, arch.hidden),
                );
                let b2 = store.add(format!("{prefix}.block{b}.b2"), Array2::zeros((1, arch.hidden)));
                blocks.push([w1.into(), b1.into(), w2.into(), b2.into()]);
            }
        }
        let head_ids: Vec<[ParamIdSerde; 2]> = heads
            .iter()
            .map(|(name, dim)| {
                let w = store.add(format!("{prefix}.{name}.w"), fan_in_uniform(rng, trunk_dim, *dim));
                let b = store.add(format!("{prefix}.{name}.b"), Array2::zeros((1, *dim)));
                [w.into(), b.into()]
            })
            .collect();
        Mlp {
            arch,
            in_dim,
            head_dims: heads.iter().map(|(_, d)| *d).collect(),
            w_in,
            b_in,
            blocks,
            heads: head_ids,
        }
    }

    pub fn head_dim(&self, head: usize) -> usize {
        self.head_dims[head]
    }

    /// Bias parameter of a head (used to break mixture-component symmetry
    /// at init and to build exact test networks).
    pub fn head_bias_id(&self, head: usize) -> ParamId {
        self.heads[head][1].into()
    }

    pub fn head_weight_id(&self, head: usize) -> ParamId {
        self.heads[head][0].into()
    }

    /// Tape forward; returns one Var per head.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &mut ParamBinding,
        x: Var,
    ) -> Vec<Var> {
        let mut h = x;
        if let Some(w_in) = self.w_in {
            let w = binding.var(tape, store, w_in.into());
            let b = binding.var(tape, store, self.b_in.unwrap().into());
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
            for blk in &self.blocks {
                let w1 = binding.var(tape, store, blk[0].into());
                let b1 = binding.var(tape, store, blk[1].into());
                let w2 = binding.var(tape, store, blk[2].into());
                let b2 = binding.var(tape, store, blk[3].into());
                let t = tape.relu(h);
                let t = tape.matmul(t, w1);
                let t = tape.add_row(t, b1);
                let t = tape.relu(t);
                let t = tape.matmul(t, w2);
                let t = tape.add_row(t, b2);
                h = tape.add(h, t);
            }
        }
        self.heads
            .iter()
            .map(|head| {
                let w = binding.var(tape, store, head[0].into());
                let b = binding.var(tape, store, head[1].into());
                let o = tape.matmul(h, w);
                tape.add_row(o, b)
            })
            .collect()
    }

    /// Plain forward (no gradients); must agree with the tape forward.
    pub fn forward_plain(&self, store: &ParamStore, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut h = x.clone();
        if let Some(w_in) = self.w_in {
            h = h.dot(store.get(w_in.into())) + store.get(self.b_in.unwrap().into());
            for blk in &self.blocks {
                let t = h.mapv(|v| v.max(0.0));
                let t = t.dot(store.get(blk[0].into())) + store.get(ParamId::from(blk[1]));
                let t = t.mapv(|v| v.max(0.0));
                let t = t.dot(store.get(blk[2].into())) + store.get(ParamId::from(blk[3]));
                h = h + t;
            }
        }
        self.heads
            .iter()
            .map(|head| h.dot(store.get(head[0].into())) + store.get(ParamId::from(head[1])))
            .collect()
    }
}

/// AMSGrad: Adam moments with a non-decreasing running maximum of the
/// second moment in the denominator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmsGrad {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    vhat: Vec<Array2<f64>>,
}

impl AmsGrad {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> =
            store.ids().map(|id| Array2::zeros(store.get(id).raw_dim())).collect();
        AmsGrad {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            vhat: zeros,
        }
    }

    /// Gradient-ascent step on the given grads (objectives are maximized).
    /// `lr_scale` multiplies the base learning rate (cosine schedule).
    pub fn ascend(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)], lr_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads {
            let i = id.0;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let vhat = &mut self.vhat[i];
            let mut value = store.get(*id).clone();
            for ((mm, vv), (vh, (p, g))) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(vhat.iter_mut().zip(value.iter_mut().zip(grad.iter())))
            {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                if *vv > *vh {
                    *vh = *vv;
                }
                let denom = (*vh / bc2).sqrt() + self.eps;
                *p += lr_scale * self.lr * (*mm / bc1) / denom;
            }
            store.set(*id, value);
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [(ParamId, Array2<f64>)], max_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}
