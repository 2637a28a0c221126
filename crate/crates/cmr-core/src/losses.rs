//! Training objectives: hinge triplet loss, directional and symmetric
//! bidirectional circle loss, the six-pair recipe section loss, and the
//! multi-level combination used on paired batches.
//!
//! All losses are built from autodiff primitives, so gradient correctness
//! follows from the per-op backward rules and is cross-checked against
//! finite differences in the tests.

use thiserror::Error;

use crate::autodiff::{Graph, NodeId, TensorError};
use crate::layers::{LayerError, Linear, ParamBinder, ParamStore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("batch of {0} has no in-batch negatives (need at least 2)")]
    BatchTooSmall(usize),
    #[error("invalid circle config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Relaxation factor `m` and scale factor `gamma` of the circle loss.
#[derive(Debug, Clone, Copy)]
pub struct CircleConfig {
    pub m: f64,
    pub gamma: f64,
    /// Aggregate the loss per query (default) or as one pooled log over the
    /// whole batch.
    pub per_query: bool,
}

impl Default for CircleConfig {
    fn default() -> Self {
        CircleConfig {
            m: 0.25,
            gamma: 32.0,
            per_query: true,
        }
    }
}

impl CircleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.m) {
            return Err(LossError::InvalidConfig(format!("m = {} outside [0, 1]", self.m)));
        }
        if self.gamma <= 0.0 {
            return Err(LossError::InvalidConfig(format!("gamma = {} must be > 0", self.gamma)));
        }
        Ok(())
    }
}

/// Which pairwise objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Circle,
    Triplet,
}

/// Weights and toggles of the multi-level loss. A disabled toggle means the
/// corresponding term is not built at all, so it contributes exactly zero
/// and its parameters receive no gradient.
#[derive(Debug, Clone, Copy)]
pub struct MultiLevelConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub use_segment_loss: bool,
    pub use_description_loss: bool,
    pub use_recipe_loss: bool,
}

impl Default for MultiLevelConfig {
    fn default() -> Self {
        MultiLevelConfig {
            alpha: 1.0,
            beta: 1.0,
            sigma: 1.0,
            use_segment_loss: true,
            use_description_loss: true,
            use_recipe_loss: true,
        }
    }
}

/// Trainable square bias-free projection applied to the second section of
/// every pair inside the recipe loss.
#[derive(Debug, Clone)]
pub struct SectionProjection {
    pub proj: Linear,
}

impl SectionProjection {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        Ok(SectionProjection {
            proj: Linear::init(store, name, dim, dim, false, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        Ok(self.proj.forward(g, binder, store, x)?)
    }
}

/// Scalar hinge triplet loss `[c_n + m - c_p]_+` on cosine similarities.
pub fn triplet_hinge(c_p: f64, c_n: f64, margin: f64) -> f64 {
    (c_n + margin - c_p).max(0.0)
}

/// Cosine similarity matrix between two row-aligned batches: rows are
/// L2-normalized (zero rows map to zero, giving similarity 0) and crossed.
pub fn cosine_matrix(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let bt = g.transpose(bn)?;
    Ok(g.matmul(an, bt)?)
}

/// Constant `[B×B]` mask with zeros on the diagonal and ones elsewhere.
fn off_diagonal_mask(g: &mut Graph, b: usize) -> Result<NodeId> {
    let mut data = vec![1.0; b * b];
    for i in 0..b {
        data[i * b + i] = 0.0;
    }
    Ok(g.constant(data, &[b, b])?)
}

/// Directional circle loss over a similarity matrix whose diagonal holds the
/// positive pairs. Per query `i`:
///
/// ```text
/// L_i = log(1 + sum_{j != i} e^{γ·[S_ij+m]_+·(S_ij−m)} · e^{γ·[1+m−S_ii]_+·(1−m−S_ii)})
/// ```
///
/// returning the mean over queries, or — with `per_query = false` — one
/// pooled log over all positive and negative pairs of the batch.
pub fn circle_loss_directional(g: &mut Graph, s: NodeId, cfg: &CircleConfig) -> Result<NodeId> {
    cfg.validate()?;
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(LossError::Tensor(TensorError::InvalidShape {
            op: "circle_loss",
            shape,
            reason: "square similarity matrix required".into(),
        }));
    }
    let b = shape[0];
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }

    // negatives: e^{γ·[s+m]_+·(s−m)} summed off-diagonal per row
    let s_plus_m = g.add_scalar(s, cfg.m)?;
    let hinge_n = g.relu(s_plus_m);
    let s_minus_m = g.add_scalar(s, -cfg.m)?;
    let weighted_n = g.mul(hinge_n, s_minus_m)?;
    let exp_n = {
        let scaled = g.scale(weighted_n, cfg.gamma);
        g.exp(scaled)
    };
    let mask = off_diagonal_mask(g, b)?;
    let masked = g.mul(exp_n, mask)?;

    // positives: e^{γ·[1+m−s_p]_+·(1−m−s_p)} from the diagonal
    let diag = g.diag(s)?;
    let neg_diag = g.scale(diag, -1.0);
    let hinge_p = {
        let shifted = g.add_scalar(neg_diag, 1.0 + cfg.m)?;
        g.relu(shifted)
    };
    let delta_p = g.add_scalar(neg_diag, 1.0 - cfg.m)?;
    let weighted_p = g.mul(hinge_p, delta_p)?;
    let exp_p = {
        let scaled = g.scale(weighted_p, cfg.gamma);
        g.exp(scaled)
    };

    if cfg.per_query {
        let neg_sums = g.sum(masked, Some(1))?;
        let inner = g.mul(neg_sums, exp_p)?;
        let shifted = g.add_scalar(inner, 1.0)?;
        let logs = g.log(shifted)?;
        Ok(g.mean(logs, None)?)
    } else {
        let neg_total = g.sum(masked, None)?;
        let pos_total = g.sum(exp_p, None)?;
        let inner = g.mul(neg_total, pos_total)?;
        let shifted = g.add_scalar(inner, 1.0)?;
        Ok(g.log(shifted)?)
    }
}

/// Symmetric bidirectional circle loss: the directional loss in both query
/// directions. The two similarity matrices are transposes of each other.
pub fn circle_loss_symmetric(
    g: &mut Graph,
    e_a: NodeId,
    e_b: NodeId,
    cfg: &CircleConfig,
) -> Result<NodeId> {
    let s = cosine_matrix(g, e_a, e_b)?;
    let forward = circle_loss_directional(g, s, cfg)?;
    let st = g.transpose(s)?;
    let backward = circle_loss_directional(g, st, cfg)?;
    Ok(g.add(forward, backward)?)
}

/// Directional batch triplet loss with in-batch negatives: mean over the
/// `B(B−1)` (query, negative) pairs of `[S_ij + m − S_ii]_+`.
pub fn triplet_loss_directional(g: &mut Graph, s: NodeId, margin: f64) -> Result<NodeId> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(LossError::Tensor(TensorError::InvalidShape {
            op: "triplet_loss",
            shape,
            reason: "square similarity matrix required".into(),
        }));
    }
    let b = shape[0];
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let diag = g.diag(s)?;
    let pos = g.expand_cols(diag, b)?;
    let diff = g.sub(s, pos)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinged = g.relu(shifted);
    let mask = off_diagonal_mask(g, b)?;
    let masked = g.mul(hinged, mask)?;
    let total = g.sum(masked, None)?;
    Ok(g.scale(total, 1.0 / (b * (b - 1)) as f64))
}

/// Symmetric batch triplet loss, mirroring the data flow of
/// [`circle_loss_symmetric`] so the two objectives are directly comparable.
pub fn triplet_loss_symmetric(
    g: &mut Graph,
    e_a: NodeId,
    e_b: NodeId,
    margin: f64,
) -> Result<NodeId> {
    let s = cosine_matrix(g, e_a, e_b)?;
    let forward = triplet_loss_directional(g, s, margin)?;
    let st = g.transpose(s)?;
    let backward = triplet_loss_directional(g, st, margin)?;
    Ok(g.add(forward, backward)?)
}

/// Pairwise loss selected by [`LossKind`]; the triplet variant reuses the
/// circle relaxation factor as its margin.
pub fn pair_loss(
    g: &mut Graph,
    e_a: NodeId,
    e_b: NodeId,
    kind: LossKind,
    cfg: &CircleConfig,
) -> Result<NodeId> {
    match kind {
        LossKind::Circle => circle_loss_symmetric(g, e_a, e_b, cfg),
        LossKind::Triplet => triplet_loss_symmetric(g, e_a, e_b, cfg.m),
    }
}

/// Recipe section alignment: the mean over the six ordered section pairs
/// `(a, b), a != b` of the symmetric loss between `E_a` and `LN(E_b)`.
pub fn recipe_loss(
    g: &mut Graph,
    binder: &mut ParamBinder,
    store: &ParamStore,
    sections: [NodeId; 3],
    projection: &SectionProjection,
    kind: LossKind,
    cfg: &CircleConfig,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(6);
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                continue;
            }
            let projected = projection.forward(g, binder, store, sections[b])?;
            terms.push(pair_loss(g, sections[a], projected, kind, cfg)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / 6.0))
}

/// Node handles for one encoded paired batch.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub e_v: NodeId,
    pub e_r: NodeId,
    pub e_s: Option<NodeId>,
    pub e_d: Option<NodeId>,
    pub e_r_tit: NodeId,
    pub e_r_ing: NodeId,
    pub e_r_ins: NodeId,
}

/// Values of the individual terms, for logging. Unweighted; the total is
/// `pair + alpha·segment + beta·description + sigma·recipe`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub pair: f64,
    pub segment: Option<f64>,
    pub description: Option<f64>,
    pub recipe: Option<f64>,
}

/// Multi-level loss over a paired batch:
/// `L = L(E_V,E_R) + α·L(E_S,E_R) + β·L(E_V,E_D) + σ·L_rec`.
/// Segment and description terms are skipped when toggled off or when the
/// batch lacks that modality.
pub fn multi_level_loss(
    g: &mut Graph,
    binder: &mut ParamBinder,
    store: &ParamStore,
    batch: &BatchEmbeddings,
    ml: &MultiLevelConfig,
    circle: &CircleConfig,
    kind: LossKind,
    projection: &SectionProjection,
) -> Result<(NodeId, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();

    let pair = pair_loss(g, batch.e_v, batch.e_r, kind, circle)?;
    breakdown.pair = g.data(pair)[0];
    let mut total = pair;

    if ml.use_segment_loss {
        if let Some(e_s) = batch.e_s {
            let term = pair_loss(g, e_s, batch.e_r, kind, circle)?;
            breakdown.segment = Some(g.data(term)[0]);
            let weighted = g.scale(term, ml.alpha);
            total = g.add(total, weighted)?;
        }
    }
    if ml.use_description_loss {
        if let Some(e_d) = batch.e_d {
            let term = pair_loss(g, batch.e_v, e_d, kind, circle)?;
            breakdown.description = Some(g.data(term)[0]);
            let weighted = g.scale(term, ml.beta);
            total = g.add(total, weighted)?;
        }
    }
    if ml.use_recipe_loss {
        let term = recipe_loss(
            g,
            binder,
            store,
            [batch.e_r_tit, batch.e_r_ing, batch.e_r_ins],
            projection,
            kind,
            circle,
        )?;
        breakdown.recipe = Some(g.data(term)[0]);
        let weighted = g.scale(term, ml.sigma);
        total = g.add(total, weighted)?;
    }

    breakdown.total = g.data(total)[0];
    Ok((total, breakdown))
}
