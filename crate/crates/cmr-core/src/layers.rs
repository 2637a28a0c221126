//! Neural building blocks and optimization: named parameters with a
//! trainable/frozen flag, linear and layer-norm layers, multi-head attention,
//! pre-norm transformer encoder layers with optional adapter slots, the
//! bottleneck adapter itself, and Adam with a step-decay schedule.
//!
//! Parameters live in a [`ParamStore`] outside any graph; a [`ParamBinder`]
//! lazily binds them into a [`Graph`] once per forward pass so that shared
//! parameters (e.g. one frozen text backbone used by four encoders) appear as
//! a single node and gradient accumulation happens on the tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("parameter {0} already registered")]
    DuplicateParameter(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("trainable parameter {0} has no gradient at optimizer step")]
    MissingGradient(String),
    #[error("adapter bottleneck {bottleneck} must be smaller than dim {dim}")]
    BottleneckTooLarge { bottleneck: usize, dim: usize },
    #[error("model dim {dim} not divisible by {heads} heads")]
    HeadsMismatch { dim: usize, heads: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// Named tensor with a trainable/frozen flag. Frozen parameters never
/// receive optimizer updates; their buffers stay bit-identical for the
/// lifetime of the model.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
    pub grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Flat registry of all model parameters in insertion order (which is
/// deterministic given a fixed construction sequence).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(LayerError::DuplicateParameter(name));
        }
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            data,
            trainable,
            grad: None,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| LayerError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(LayerError::UnknownParameter(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// `param.grad += g`, allocating on first use.
    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        match p.grad.as_mut() {
            Some(buf) => {
                for (t, s) in buf.iter_mut().zip(g) {
                    *t += s;
                }
            }
            None => p.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad = None;
        }
    }

    /// Element counts partitioned by trainable flag: `(trainable, frozen)`.
    pub fn count_params(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for p in &self.params {
            if p.trainable {
                trainable += p.numel();
            } else {
                frozen += p.numel();
            }
        }
        (trainable, frozen)
    }

    /// FNV-1a over the raw bytes of every frozen buffer, in insertion order.
    /// Stays constant across training iff frozen parameters are untouched.
    pub fn frozen_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            if p.trainable {
                continue;
            }
            for v in &p.data {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Per-graph binding of store parameters to tape nodes. Binding the same
/// name twice returns the same node, so reuse of shared weights accumulates
/// gradients instead of forking the parameter.
#[derive(Debug, Default)]
pub struct ParamBinder {
    bound: HashMap<String, NodeId>,
}

impl ParamBinder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = store.get(name)?;
        let mut t = Tensor::new(p.data.clone(), &p.shape)?;
        t.requires_grad = p.trainable;
        let id = g.leaf(t);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Pre-seed a binding with an existing node, overriding what the store
    /// would provide. Used by gradient-check harnesses to substitute a leaf
    /// under test for a named parameter.
    pub fn insert_bound(&mut self, name: &str, id: NodeId) {
        self.bound.insert(name.to_string(), id);
    }

    /// Names of trainable parameters bound into this graph, sorted for
    /// deterministic downstream iteration.
    pub fn touched_trainable(&self, store: &ParamStore) -> Vec<String> {
        let mut names: Vec<String> = self
            .bound
            .keys()
            .filter(|n| store.get(n).map(|p| p.trainable).unwrap_or(false))
            .cloned()
            .collect();
        names.sort();
        names
    }

    /// After `backward`, pull gradients of bound trainable parameters out of
    /// the graph and accumulate them into the store.
    pub fn harvest_grads(&self, g: &Graph, store: &mut ParamStore) -> Result<()> {
        for name in self.touched_trainable(store) {
            let id = self.bound[&name];
            if let Some(grad) = g.grad(id) {
                store.accumulate_grad(&name, grad)?;
            }
        }
        Ok(())
    }
}

// ── initialization ──────────────────────────────────────────────────

/// Gaussian init with the conventional 0.02 std used for small transformers.
pub fn normal_init(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

// ── layers ──────────────────────────────────────────────────────────

/// `y = x @ W (+ b)`. Holds parameter names, not data.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        store.insert(&w, &[in_dim, out_dim], normal_init(rng, in_dim * out_dim, 0.02), trainable)?;
        let b = if bias {
            let b = format!("{name}.b");
            store.insert(&b, &[out_dim], vec![0.0; out_dim], trainable)?;
            Some(b)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = binder.bind(g, store, &self.w)?;
        let mut y = g.matmul(x, w)?;
        if let Some(bn) = &self.b {
            let b = binder.bind(g, store, bn)?;
            y = g.add_bias(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(&gamma, &[dim], vec![1.0; dim], trainable)?;
        store.insert(&beta, &[dim], vec![0.0; dim], trainable)?;
        Ok(LayerNorm { gamma, beta, dim, eps: 1e-5 })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = binder.bind(g, store, &self.gamma)?;
        let beta = binder.bind(g, store, &self.beta)?;
        Ok(g.layer_norm(x, gamma, beta, self.eps)?)
    }
}

/// Bottleneck adapter: `W_up · ReLU(W_down · h) + h`, applied row-wise.
/// The down projection gets a small random init, the up projection starts at
/// zero so a fresh adapter is exactly the identity map.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub w_down: String,
    pub w_up: String,
    pub dim: usize,
    pub bottleneck: usize,
}

impl Adapter {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        bottleneck: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if bottleneck >= dim {
            return Err(LayerError::BottleneckTooLarge { bottleneck, dim });
        }
        let w_down = format!("{name}.w_down");
        let w_up = format!("{name}.w_up");
        store.insert(&w_down, &[dim, bottleneck], normal_init(rng, dim * bottleneck, 0.02), true)?;
        store.insert(&w_up, &[bottleneck, dim], vec![0.0; bottleneck * dim], true)?;
        Ok(Adapter { w_down, w_up, dim, bottleneck })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        store: &ParamStore,
        h: NodeId,
    ) -> Result<NodeId> {
        let wd = binder.bind(g, store, &self.w_down)?;
        let wu = binder.bind(g, store, &self.w_up)?;
        let down = g.matmul(h, wd)?;
        let act = g.relu(down);
        let up = g.matmul(act, wu)?;
        Ok(g.add(up, h)?)
    }
}

/// The two adapter slots of one transformer layer: after the attention
/// sublayer and after the feed-forward sublayer. Either may be absent.
#[derive(Debug, Clone, Default)]
pub struct LayerAdapters {
    pub attn: Option<Adapter>,
    pub ff: Option<Adapter>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(LayerError::HeadsMismatch { dim, heads });
        }
        Ok(MultiHeadAttention {
            wq: Linear::init(store, &format!("{name}.wq"), dim, dim, true, trainable, rng)?,
            wk: Linear::init(store, &format!("{name}.wk"), dim, dim, true, trainable, rng)?,
            wv: Linear::init(store, &format!("{name}.wv"), dim, dim, true, trainable, rng)?,
            wo: Linear::init(store, &format!("{name}.wo"), dim, dim, true, trainable, rng)?,
            dim,
            heads,
        })
    }

    /// Self-attention over a `[T×d]` sequence. `mask[t] = false` removes
    /// position `t` from the attention normalization of every query.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        store: &ParamStore,
        x: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let head_dim = self.dim / self.heads;
        let q = self.wq.forward(g, binder, store, x)?;
        let k = self.wk.forward(g, binder, store, x)?;
        let v = self.wv.forward(g, binder, store, x)?;

        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * head_dim;
            let qh = g.slice(q, 1, off, head_dim)?;
            let kh = g.slice(k, 1, off, head_dim)?;
            let vh = g.slice(v, 1, off, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
            let weights = match mask {
                Some(m) => g.softmax_rows_masked(scaled, m)?,
                None => g.softmax_rows(scaled)?,
            };
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = g.concat(&heads, 1)?;
        self.wo.forward(g, binder, store, merged)
    }
}

/// Pre-norm transformer encoder layer. Adapters, when present, transform
/// each sublayer's output before that sublayer's residual addition:
///
/// ```text
/// h = x + A_attn(MHA(LN1(x)))
/// y = h + A_ff(FF(LN2(h)))
/// ```
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub dim: usize,
}

impl TransformerLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = 4 * dim;
        Ok(TransformerLayer {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim, trainable)?,
            attn: MultiHeadAttention::init(store, &format!("{name}.attn"), dim, heads, trainable, rng)?,
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim, trainable)?,
            ff1: Linear::init(store, &format!("{name}.ff1"), dim, hidden, true, trainable, rng)?,
            ff2: Linear::init(store, &format!("{name}.ff2"), hidden, dim, true, trainable, rng)?,
            dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        store: &ParamStore,
        x: NodeId,
        mask: Option<&[bool]>,
        adapters: Option<&LayerAdapters>,
    ) -> Result<NodeId> {
        if let Some(m) = mask {
            if !m.iter().any(|&v| v) {
                return Err(LayerError::Tensor(TensorError::Domain {
                    op: "transformer_layer",
                    reason: "all positions masked".into(),
                }));
            }
        }
        let normed = self.ln1.forward(g, binder, store, x)?;
        let mut attn_out = self.attn.forward(g, binder, store, normed, mask)?;
        if let Some(a) = adapters.and_then(|a| a.attn.as_ref()) {
            attn_out = a.forward(g, binder, store, attn_out)?;
        }
        let h = g.add(x, attn_out)?;

        let normed2 = self.ln2.forward(g, binder, store, h)?;
        let up = self.ff1.forward(g, binder, store, normed2)?;
        let act = g.relu(up);
        let mut ff_out = self.ff2.forward(g, binder, store, act)?;
        if let Some(a) = adapters.and_then(|a| a.ff.as_ref()) {
            ff_out = a.forward(g, binder, store, ff_out)?;
        }
        Ok(g.add(h, ff_out)?)
    }
}

// ── optimization ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to gradients; 0 disables.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction. Moment buffers are allocated per parameter on
/// first participation; frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    slots: HashMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState { cfg, slots: HashMap::new() }
    }

    /// Apply one Adam step to the named parameters. Every trainable name must
    /// carry a populated gradient; frozen names are skipped even if they
    /// somehow carry one. Gradients of stepped parameters are cleared.
    pub fn step(&mut self, store: &mut ParamStore, names: &[String], lr: f64) -> Result<()> {
        // Optional global-norm clip across this step's gradients.
        let mut scale = 1.0;
        if self.cfg.grad_clip > 0.0 {
            let mut sq = 0.0;
            for name in names {
                let p = store.get(name)?;
                if !p.trainable {
                    continue;
                }
                let g = p.grad.as_ref().ok_or_else(|| LayerError::MissingGradient(name.clone()))?;
                sq += g.iter().map(|&x| x * x).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > self.cfg.grad_clip {
                scale = self.cfg.grad_clip / norm;
            }
        }

        for name in names {
            let cfg = self.cfg.clone();
            let p = store.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            let grad = p.grad.take().ok_or_else(|| LayerError::MissingGradient(name.clone()))?;
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
            for i in 0..grad.len() {
                let mut gi = grad[i] * scale;
                if cfg.weight_decay > 0.0 {
                    gi += cfg.weight_decay * p.data[i];
                }
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * gi;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Step-decay schedule: `base_lr * decay^(epoch / every)`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, decay: f64, every: usize) -> f64 {
    base_lr * decay.powi((epoch / every) as i32)
}
