//! The four embedding branches: an adapter-consolidated image backbone, a
//! shared frozen text backbone with four independent adapter sets (title,
//! ingredients, instructions, description), the hierarchical recipe encoder
//! with its two trainable sentence aggregators and tanh fusion head, and the
//! parameter-free segment averager.
//!
//! Backbones are seeded, randomly initialized mini-transformers whose base
//! weights are frozen; only adapter sets, aggregators and heads train.
//! Identical inputs with identical parameters encode to identical outputs.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, TensorError};
use crate::layers::{
    normal_init, Adapter, LayerAdapters, LayerError, Linear, ParamBinder, ParamStore,
    TransformerLayer,
};
use crate::losses::SectionProjection;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("empty token sequence for {0}")]
    EmptyInput(&'static str),
    #[error("token id {token} >= vocabulary size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("{what}: got {got}, limit {limit}")]
    LimitExceeded {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    #[error("segment vector has dimension {got}, expected {expected}")]
    SegmentDim { got: usize, expected: usize },
    #[error("no segments to average")]
    NoSegments,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

pub const MAX_SENTENCES: usize = 15;
pub const MAX_SENTENCE_TOKENS: usize = 20;
pub const MAX_SEGMENTS: usize = 4;

/// Model architecture and ablation toggles. `Default` mirrors the
/// paper-scale configuration; [`ModelConfig::desk`] is the small setup used
/// by tests and examples.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension d shared by every branch.
    pub dim: usize,
    /// Frozen backbone depth.
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    /// Backbone vocabulary; must cover every token id in the corpus.
    pub vocab: usize,
    /// Maximum sequence length of the backbones.
    pub max_positions: usize,
    /// Adapter bottleneck dimension.
    pub bottleneck: usize,
    pub aggregator_layers: usize,
    pub aggregator_heads: usize,
    /// Ablation toggles: a disabled branch gets no adapter parameters at all.
    pub adapters_image: bool,
    pub adapters_recipe: bool,
    pub adapters_description: bool,
    /// Adapter slots inside each transformer layer.
    pub adapter_attn_slot: bool,
    pub adapter_ff_slot: bool,
    /// Learned positions for the instruction aggregator (order matters more
    /// for instructions than ingredients); off by default.
    pub instruction_positions: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 512,
            backbone_layers: 2,
            backbone_heads: 2,
            vocab: 8192,
            max_positions: 32,
            bottleneck: 64,
            aggregator_layers: 2,
            aggregator_heads: 4,
            adapters_image: true,
            adapters_recipe: true,
            adapters_description: true,
            adapter_attn_slot: true,
            adapter_ff_slot: true,
            instruction_positions: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: small dims, same structure.
    pub fn desk() -> Self {
        ModelConfig {
            dim: 64,
            bottleneck: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.vocab == 0 || self.backbone_layers == 0 {
            return Err(EncoderError::InvalidConfig("zero dimension".into()));
        }
        if self.dim % self.backbone_heads != 0 || self.dim % self.aggregator_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "dim {} not divisible by head counts {}/{}",
                self.dim, self.backbone_heads, self.aggregator_heads
            )));
        }
        if self.bottleneck >= self.dim {
            return Err(EncoderError::InvalidConfig(format!(
                "bottleneck {} must be < dim {}",
                self.bottleneck, self.dim
            )));
        }
        Ok(())
    }
}

/// Frozen token/position embedding tables plus a stack of frozen
/// transformer layers; consumers inject their own adapters per layer.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub tok_emb: String,
    pub pos_emb: String,
    pub layers: Vec<TransformerLayer>,
    pub vocab: usize,
    pub max_positions: usize,
    pub dim: usize,
}

impl Backbone {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let tok_emb = format!("{prefix}.tok_emb");
        let pos_emb = format!("{prefix}.pos_emb");
        store.insert(
            &tok_emb,
            &[cfg.vocab, cfg.dim],
            normal_init(rng, cfg.vocab * cfg.dim, 0.02),
            false,
        )?;
        store.insert(
            &pos_emb,
            &[cfg.max_positions, cfg.dim],
            normal_init(rng, cfg.max_positions * cfg.dim, 0.02),
            false,
        )?;
        let layers = (0..cfg.backbone_layers)
            .map(|i| {
                TransformerLayer::init(
                    store,
                    &format!("{prefix}.layer{i}"),
                    cfg.dim,
                    cfg.backbone_heads,
                    false,
                    rng,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Backbone {
            tok_emb,
            pos_emb,
            layers,
            vocab: cfg.vocab,
            max_positions: cfg.max_positions,
            dim: cfg.dim,
        })
    }

    /// Encode a token sequence to a `[d]` vector: embeddings + positions,
    /// the frozen stack with per-layer adapters, then mean pooling.
    fn encode(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        store: &ParamStore,
        what: &'static str,
        tokens: &[usize],
        adapters: Option<&AdapterStack>,
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyInput(what));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(EncoderError::TokenOutOfRange {
                token: t,
                vocab: self.vocab,
            });
        }
        let tokens = &tokens[..tokens.len().min(self.max_positions)];

        let tok_table = binder.bind(g, store, &self.tok_emb)?;
        let pos_table = binder.bind(g, store, &self.pos_emb)?;
        let tok = g.gather_rows(tok_table, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;

        for (i, layer) in self.layers.iter().enumerate() {
            let layer_adapters = adapters.map(|a| &a.layers[i]);
            x = layer.forward(g, binder, store, x, None, layer_adapters)?;
        }
        Ok(g.mean(x, Some(0))?)
    }
}

/// One adapter pair per backbone layer; the trainable half of a consumer's
/// view of a frozen backbone.
#[derive(Debug, Clone)]
pub struct AdapterStack {
    pub layers: Vec<LayerAdapters>,
}

impl AdapterStack {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..cfg.backbone_layers)
            .map(|i| {
                Ok(LayerAdapters {
                    attn: if cfg.adapter_attn_slot {
                        Some(Adapter::init(
                            store,
                            &format!("{prefix}.layer{i}.attn_adapter"),
                            cfg.dim,
                            cfg.bottleneck,
                            rng,
                        )?)
                    } else {
                        None
                    },
                    ff: if cfg.adapter_ff_slot {
                        Some(Adapter::init(
                            store,
                            &format!("{prefix}.layer{i}.ff_adapter"),
                            cfg.dim,
                            cfg.bottleneck,
                            rng,
                        )?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterStack { layers })
    }
}

/// Trainable transformer over sentence embeddings, mean-pooled. Without
/// positional encodings it is permutation-equivariant.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub layers: Vec<TransformerLayer>,
    pub pos_emb: Option<String>,
    pub dim: usize,
}

impl Aggregator {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        positions: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..cfg.aggregator_layers)
            .map(|i| {
                TransformerLayer::init(
                    store,
                    &format!("{prefix}.layer{i}"),
                    cfg.dim,
                    cfg.aggregator_heads,
                    true,
                    rng,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let pos_emb = if positions {
            let name = format!("{prefix}.pos_emb");
            store.insert(
                &name,
                &[MAX_SENTENCES, cfg.dim],
                normal_init(rng, MAX_SENTENCES * cfg.dim, 0.02),
                true,
            )?;
            Some(name)
        } else {
            None
        };
        Ok(Aggregator {
            layers,
            pos_emb,
            dim: cfg.dim,
        })
    }

    /// Aggregate a non-empty list of `[d]` sentence embeddings into one `[d]`.
    fn forward(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        store: &ParamStore,
        sentence_embeddings: &[NodeId],
    ) -> Result<NodeId> {
        let rows: Vec<NodeId> = sentence_embeddings
            .iter()
            .map(|&e| g.reshape(e, &[1, self.dim]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut x = g.concat(&rows, 0)?;
        if let Some(pos_name) = &self.pos_emb {
            let table = binder.bind(g, store, pos_name)?;
            let positions: Vec<usize> = (0..sentence_embeddings.len()).collect();
            let pos = g.gather_rows(table, &positions)?;
            x = g.add(x, pos)?;
        }
        for layer in &self.layers {
            x = layer.forward(g, binder, store, x, None, None)?;
        }
        Ok(g.mean(x, Some(0))?)
    }
}

/// Node handles for one encoded sample inside a graph.
#[derive(Debug, Clone)]
pub struct SampleNodes {
    pub e_v: Option<NodeId>,
    pub e_r: NodeId,
    pub e_s: Option<NodeId>,
    pub e_d: Option<NodeId>,
    pub e_r_tit: NodeId,
    pub e_r_ing: NodeId,
    pub e_r_ins: NodeId,
}

/// Concrete per-sample embeddings, all of dimension d. `e_s` is present
/// only when the sample has segments, `e_v`/`e_d` only when it is paired.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub e_v: Option<Vec<f64>>,
    pub e_r: Vec<f64>,
    pub e_s: Option<Vec<f64>>,
    pub e_d: Option<Vec<f64>>,
    pub e_r_tit: Vec<f64>,
    pub e_r_ing: Vec<f64>,
    pub e_r_ins: Vec<f64>,
}

/// Which recipe section a sentence list belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Title,
    Ingredients,
    Instructions,
}

/// The full embedding model: two frozen backbones, per-consumer adapter
/// stacks, two aggregators, the fusion head, and the recipe-loss projection.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub image_backbone: Backbone,
    pub text_backbone: Backbone,
    pub image_adapters: Option<AdapterStack>,
    pub title_adapters: Option<AdapterStack>,
    pub ingredient_adapters: Option<AdapterStack>,
    pub instruction_adapters: Option<AdapterStack>,
    pub description_adapters: Option<AdapterStack>,
    pub ingredient_aggregator: Aggregator,
    pub instruction_aggregator: Aggregator,
    pub fusion: Linear,
    pub section_projection: SectionProjection,
    /// Count of over-limit sentence lists / sentences truncated to the
    /// configured maxima.
    pub truncations: AtomicU64,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let image_backbone = Backbone::init(&mut store, "img_backbone", &cfg, &mut rng)?;
        let text_backbone = Backbone::init(&mut store, "txt_backbone", &cfg, &mut rng)?;

        let image_adapters = cfg
            .adapters_image
            .then(|| AdapterStack::init(&mut store, "img_adapter", &cfg, &mut rng))
            .transpose()?;
        let title_adapters = cfg
            .adapters_recipe
            .then(|| AdapterStack::init(&mut store, "tit_adapter", &cfg, &mut rng))
            .transpose()?;
        let ingredient_adapters = cfg
            .adapters_recipe
            .then(|| AdapterStack::init(&mut store, "ing_adapter", &cfg, &mut rng))
            .transpose()?;
        let instruction_adapters = cfg
            .adapters_recipe
            .then(|| AdapterStack::init(&mut store, "ins_adapter", &cfg, &mut rng))
            .transpose()?;
        let description_adapters = cfg
            .adapters_description
            .then(|| AdapterStack::init(&mut store, "dec_adapter", &cfg, &mut rng))
            .transpose()?;

        let ingredient_aggregator = Aggregator::init(&mut store, "agg_ing", &cfg, false, &mut rng)?;
        let instruction_aggregator = Aggregator::init(
            &mut store,
            "agg_ins",
            &cfg,
            cfg.instruction_positions,
            &mut rng,
        )?;
        let fusion = Linear::init(&mut store, "fusion", 3 * cfg.dim, cfg.dim, true, true, &mut rng)?;
        let section_projection = SectionProjection::init(&mut store, "section_proj", cfg.dim, &mut rng)
            .map_err(|e| EncoderError::InvalidConfig(e.to_string()))?;

        Ok(Model {
            cfg,
            store,
            image_backbone,
            text_backbone,
            image_adapters,
            title_adapters,
            ingredient_adapters,
            instruction_adapters,
            description_adapters,
            ingredient_aggregator,
            instruction_aggregator,
            fusion,
            section_projection,
            truncations: AtomicU64::new(0),
        })
    }

    /// `E_V`: image tokens through the adapter-consolidated image backbone.
    pub fn encode_image(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        tokens: &[usize],
    ) -> Result<NodeId> {
        if tokens.len() > self.image_backbone.max_positions {
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
        self.image_backbone.encode(
            g,
            binder,
            &self.store,
            "image",
            tokens,
            self.image_adapters.as_ref(),
        )
    }

    /// `E_D`: description tokens through the shared text backbone with the
    /// description adapter set.
    pub fn encode_description(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        tokens: &[usize],
    ) -> Result<NodeId> {
        if tokens.len() > self.text_backbone.max_positions {
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
        self.text_backbone.encode(
            g,
            binder,
            &self.store,
            "description",
            tokens,
            self.description_adapters.as_ref(),
        )
    }

    fn section_adapters(&self, section: Section) -> Option<&AdapterStack> {
        match section {
            Section::Title => self.title_adapters.as_ref(),
            Section::Ingredients => self.ingredient_adapters.as_ref(),
            Section::Instructions => self.instruction_adapters.as_ref(),
        }
    }

    /// Encode each sentence independently through the shared frozen text
    /// backbone with this section's adapters, aggregate, and mean-pool.
    /// Over-limit inputs are truncated and counted, not rejected.
    pub fn encode_section_list(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        section: Section,
        sentences: &[Vec<usize>],
    ) -> Result<NodeId> {
        if sentences.is_empty() {
            return Err(EncoderError::EmptyInput(match section {
                Section::Title => "title",
                Section::Ingredients => "ingredients",
                Section::Instructions => "instructions",
            }));
        }
        let mut sentences = sentences;
        if sentences.len() > MAX_SENTENCES {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            sentences = &sentences[..MAX_SENTENCES];
        }
        let adapters = self.section_adapters(section);
        let mut embeddings = Vec::with_capacity(sentences.len());
        for sentence in sentences {
            let mut toks = sentence.as_slice();
            if toks.len() > MAX_SENTENCE_TOKENS {
                self.truncations.fetch_add(1, Ordering::Relaxed);
                toks = &toks[..MAX_SENTENCE_TOKENS];
            }
            embeddings.push(self.text_backbone.encode(
                g,
                binder,
                &self.store,
                "sentence",
                toks,
                adapters,
            )?);
        }
        let aggregator = match section {
            Section::Ingredients => &self.ingredient_aggregator,
            Section::Instructions => &self.instruction_aggregator,
            Section::Title => {
                // title is a single sentence; no aggregator on this path
                return Ok(embeddings[0]);
            }
        };
        aggregator.forward(g, binder, &self.store, &embeddings)
    }

    /// `(E_R, E_R_tit, E_R_ing, E_R_ins)`:
    /// `E_R = tanh(FC(concat(tit, ing, ins)))`.
    pub fn encode_recipe(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        title: &[usize],
        ingredients: &[Vec<usize>],
        instructions: &[Vec<usize>],
    ) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
        let tit = self.encode_section_list(g, binder, Section::Title, &[title.to_vec()])?;
        let ing = self.encode_section_list(g, binder, Section::Ingredients, ingredients)?;
        let ins = self.encode_section_list(g, binder, Section::Instructions, instructions)?;

        let d = self.cfg.dim;
        let tit_row = g.reshape(tit, &[1, d])?;
        let ing_row = g.reshape(ing, &[1, d])?;
        let ins_row = g.reshape(ins, &[1, d])?;
        let merged = g.concat(&[tit_row, ing_row, ins_row], 1)?;
        let fused = self.fusion.forward(g, binder, &self.store, merged)?;
        let squashed = g.tanh(fused);
        let e_r = g.reshape(squashed, &[d])?;
        Ok((e_r, tit, ing, ins))
    }

    /// `E_S`: plain average of the sample's segment vectors. No trainable
    /// parameters on this path; the result enters graphs as a constant.
    pub fn encode_segments(&self, g: &mut Graph, segments: &[Vec<f64>]) -> Result<NodeId> {
        let d = self.cfg.dim;
        if segments.is_empty() {
            return Err(EncoderError::NoSegments);
        }
        if segments.len() > MAX_SEGMENTS {
            return Err(EncoderError::LimitExceeded {
                what: "segments",
                got: segments.len(),
                limit: MAX_SEGMENTS,
            });
        }
        if let Some(v) = segments.iter().find(|v| v.len() != d) {
            return Err(EncoderError::SegmentDim {
                got: v.len(),
                expected: d,
            });
        }
        let mut mean = vec![0.0; d];
        for v in segments {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let n = segments.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(g.constant(mean, &[d])?)
    }

    /// Encode one sample record into graph nodes, honoring modality
    /// availability.
    pub fn encode_sample(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        record: &crate::data::SampleRecord,
    ) -> Result<SampleNodes> {
        let (e_r, tit, ing, ins) = self.encode_recipe(
            g,
            binder,
            &record.title_tokens,
            &record.ingredient_sentences,
            &record.instruction_sentences,
        )?;
        let e_v = record
            .image_tokens
            .as_ref()
            .map(|t| self.encode_image(g, binder, t))
            .transpose()?;
        let e_s = if record.segment_vectors.is_empty() {
            None
        } else {
            Some(self.encode_segments(g, &record.segment_vectors)?)
        };
        let e_d = record
            .description_tokens
            .as_ref()
            .map(|t| self.encode_description(g, binder, t))
            .transpose()?;
        Ok(SampleNodes {
            e_v,
            e_r,
            e_s,
            e_d,
            e_r_tit: tit,
            e_r_ing: ing,
            e_r_ins: ins,
        })
    }

    /// Evaluation-mode encoding: run a throwaway graph and extract values.
    pub fn encode_bundle(&self, record: &crate::data::SampleRecord) -> Result<EmbeddingBundle> {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new();
        let nodes = self.encode_sample(&mut g, &mut binder, record)?;
        let take = |id: NodeId| g.data(id).to_vec();
        Ok(EmbeddingBundle {
            e_v: nodes.e_v.map(take),
            e_r: take(nodes.e_r),
            e_s: nodes.e_s.map(take),
            e_d: nodes.e_d.map(take),
            e_r_tit: take(nodes.e_r_tit),
            e_r_ing: take(nodes.e_r_ing),
            e_r_ins: take(nodes.e_r_ins),
        })
    }

    pub fn count_params(&self) -> (usize, usize) {
        self.store.count_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            backbone_layers: 2,
            backbone_heads: 2,
            vocab: 50,
            max_positions: 16,
            bottleneck: 2,
            aggregator_layers: 2,
            aggregator_heads: 2,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn encode_image_values(model: &Model, tokens: &[usize]) -> Vec<f64> {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new();
        let id = model.encode_image(&mut g, &mut binder, tokens).unwrap();
        g.data(id).to_vec()
    }

    #[test]
    fn encode_image_deterministic() {
        let model = Model::new(small_cfg()).unwrap();
        let tokens = [3usize, 14, 15, 9, 2];
        assert_eq!(encode_image_values(&model, &tokens), encode_image_values(&model, &tokens));
    }

    #[test]
    fn encode_image_rejects_bad_input() {
        let model = Model::new(small_cfg()).unwrap();
        let mut g = Graph::new();
        let mut binder = ParamBinder::new();
        assert!(matches!(
            model.encode_image(&mut g, &mut binder, &[]),
            Err(EncoderError::EmptyInput(_))
        ));
        assert!(matches!(
            model.encode_image(&mut g, &mut binder, &[50]),
            Err(EncoderError::TokenOutOfRange { token: 50, vocab: 50 })
        ));
    }

    #[test]
    fn zero_adapters_match_frozen_backbone_encoding() {
        // adapters start with w_up = 0, so a fresh adapter stack encodes
        // exactly like the adapter-free backbone
        let with = Model::new(small_cfg()).unwrap();
        let without = Model::new(ModelConfig {
            adapters_image: false,
            ..small_cfg()
        })
        .unwrap();
        let tokens = [1usize, 2, 3, 4];
        assert_eq!(
            encode_image_values(&with, &tokens),
            encode_image_values(&without, &tokens)
        );
    }

    #[test]
    fn image_gradients_reach_adapters_not_frozen_weights() {
        let model = Model::new(small_cfg()).unwrap();
        let mut g = Graph::new();
        let mut binder = ParamBinder::new();
        // nonzero w_up so the adapter path carries signal
        let mut model = model;
        let names: Vec<String> = model
            .store
            .iter()
            .filter(|p| p.name.contains("w_up"))
            .map(|p| p.name.clone())
            .collect();
        for n in names {
            let p = model.store.get_mut(&n).unwrap();
            let len = p.data.len();
            p.data = (0..len).map(|i| 0.01 * (i as f64 + 1.0)).collect();
        }
        let e_v = model.encode_image(&mut g, &mut binder, &[5, 6, 7]).unwrap();
        let sq = g.mul(e_v, e_v).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        binder.harvest_grads(&g, &mut model.store).unwrap();

        let adapter_grad_norm: f64 = model
            .store
            .iter()
            .filter(|p| p.name.starts_with("img_adapter"))
            .flat_map(|p| p.grad.iter().flatten())
            .map(|&v| v * v)
            .sum();
        assert!(adapter_grad_norm > 0.0, "adapters receive gradient");
        // frozen backbone params must carry no gradient at all
        assert!(model
            .store
            .iter()
            .filter(|p| p.name.starts_with("img_backbone"))
            .all(|p| p.grad.is_none()));
    }

    #[test]
    fn section_list_minimal_and_duplicate_invariance() {
        let model = Model::new(small_cfg()).unwrap();
        let sentence = vec![4usize, 8, 15];
        let single = {
            let mut g = Graph::new();
            let mut binder = ParamBinder::new();
            let id = model
                .encode_section_list(&mut g, &mut binder, Section::Ingredients, &[sentence.clone()])
                .unwrap();
            assert_eq!(g.shape(id), &[8]);
            g.data(id).to_vec()
        };
        // duplicating the sole sentence leaves the pooled output unchanged:
        // the aggregator has no positional encodings
        let doubled = {
            let mut g = Graph::new();
            let mut binder = ParamBinder::new();
            let id = model
                .encode_section_list(
                    &mut g,
                    &mut binder,
                    Section::Ingredients,
                    &[sentence.clone(), sentence],
                )
                .unwrap();
            g.data(id).to_vec()
        };
        for (a, b) in single.iter().zip(&doubled) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn section_list_truncates_and_counts() {
        let model = Model::new(small_cfg()).unwrap();
        let long_sentence: Vec<usize> = (0..30).map(|i| i % 40).collect();
        let sentences: Vec<Vec<usize>> = (0..17).map(|_| long_sentence.clone()).collect();
        let mut g = Graph::new();
        let mut binder = ParamBinder::new();
        model
            .encode_section_list(&mut g, &mut binder, Section::Instructions, &sentences)
            .unwrap();
        // 1 over-limit list + 15 over-limit sentences
        assert_eq!(model.truncations.load(Ordering::Relaxed), 16);

        let err = model.encode_section_list(&mut g, &mut binder, Section::Ingredients, &[]);
        assert!(matches!(err, Err(EncoderError::EmptyInput("ingredients"))));
    }

    #[test]
    fn recipe_embedding_in_tanh_range() {
        let model = Model::new(small_cfg()).unwrap();
        let mut g = Graph::new();
        let mut binder = ParamBinder::new();
        let (e_r, ..) = model
            .encode_recipe(
                &mut g,
                &mut binder,
                &[1, 2, 3],
                &[vec![4, 5], vec![6, 7]],
                &[vec![8, 9], vec![10]],
            )
            .unwrap();
        assert_eq!(g.shape(e_r), &[8]);
        assert!(g.data(e_r).iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn recipe_zero_fusion_gives_zero_vector() {
        let mut model = Model::new(small_cfg()).unwrap();
        model.store.get_mut("fusion.w").unwrap().data.fill(0.0);
        model.store.get_mut("fusion.b").unwrap().data.fill(0.0);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new();
        let (e_r, ..) = model
            .encode_recipe(&mut g, &mut binder, &[1], &[vec![2]], &[vec![3]])
            .unwrap();
        assert!(g.data(e_r).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_average_examples() {
        let cfg = ModelConfig {
            dim: 2,
            backbone_heads: 1,
            aggregator_heads: 1,
            bottleneck: 1,
            vocab: 10,
            ..small_cfg()
        };
        let model = Model::new(cfg).unwrap();
        let mut g = Graph::new();
        let e = model
            .encode_segments(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap();
        assert_eq!(g.data(e), &[0.5, 0.5]);

        let single = model.encode_segments(&mut g, &[vec![0.3, -0.4]]).unwrap();
        assert_eq!(g.data(single), &[0.3, -0.4]);

        assert!(matches!(
            model.encode_segments(&mut g, &[]),
            Err(EncoderError::NoSegments)
        ));
    }

    #[test]
    fn segment_average_matches_scalar_summation() {
        let model = Model::new(small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let segs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut g = Graph::new();
        let e = model.encode_segments(&mut g, &segs).unwrap();
        for j in 0..8 {
            let mut acc = 0.0;
            for s in &segs {
                acc += s[j];
            }
            acc /= 4.0;
            assert!((g.data(e)[j] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn adapter_sets_are_independent() {
        // perturbing the title adapters changes only the title encoding
        let cfg = small_cfg();
        let base = Model::new(cfg.clone()).unwrap();
        let mut perturbed = Model::new(cfg).unwrap();
        for p in [
            "tit_adapter.layer0.attn_adapter.w_down",
            "tit_adapter.layer0.attn_adapter.w_up",
        ] {
            let param = perturbed.store.get_mut(p).unwrap();
            // alternating signs guarantee the relu bottleneck passes signal
            for (i, v) in param.data.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.5 } else { -0.5 };
            }
        }
        let sentences = [vec![3usize, 4, 5]];
        let encode = |m: &Model, section: Section| -> Vec<f64> {
            let mut g = Graph::new();
            let mut binder = ParamBinder::new();
            let id = m
                .encode_section_list(&mut g, &mut binder, section, &sentences)
                .unwrap();
            g.data(id).to_vec()
        };
        assert_ne!(encode(&base, Section::Title), encode(&perturbed, Section::Title));
        assert_eq!(
            encode(&base, Section::Ingredients),
            encode(&perturbed, Section::Ingredients)
        );
        assert_eq!(
            encode(&base, Section::Instructions),
            encode(&perturbed, Section::Instructions)
        );
        // description shares the frozen backbone but not the adapters
        let desc = |m: &Model| {
            let mut g = Graph::new();
            let mut binder = ParamBinder::new();
            let id = m.encode_description(&mut g, &mut binder, &[3, 4, 5]).unwrap();
            g.data(id).to_vec()
        };
        assert_eq!(desc(&base), desc(&perturbed));
    }

    #[test]
    fn description_loss_feeds_only_description_adapters() {
        let mut model = Model::new(small_cfg()).unwrap();
        // nonzero up-projections everywhere so gradients could flow if wired
        let names: Vec<String> = model
            .store
            .iter()
            .filter(|p| p.name.ends_with("w_up"))
            .map(|p| p.name.clone())
            .collect();
        for n in names {
            model.store.get_mut(&n).unwrap().data.fill(0.05);
        }
        let mut g = Graph::new();
        let mut binder = ParamBinder::new();
        let e_v = model.encode_image(&mut g, &mut binder, &[1, 2, 3, 4]).unwrap();
        let e_d = model.encode_description(&mut g, &mut binder, &[5, 6, 7]).unwrap();
        // simple alignment loss between the two embeddings
        let diff = g.sub(e_v, e_d).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        binder.harvest_grads(&g, &mut model.store).unwrap();

        let grad_norm = |prefix: &str| -> f64 {
            model
                .store
                .iter()
                .filter(|p| p.name.starts_with(prefix))
                .flat_map(|p| p.grad.iter().flatten())
                .map(|&v| v * v)
                .sum()
        };
        assert!(grad_norm("dec_adapter") > 0.0);
        assert!(grad_norm("img_adapter") > 0.0);
        assert_eq!(grad_norm("tit_adapter"), 0.0);
        assert_eq!(grad_norm("ing_adapter"), 0.0);
        assert_eq!(grad_norm("ins_adapter"), 0.0);
    }

    #[test]
    fn recipe_grads_match_finite_differences_end_to_end() {
        // full recipe path (three sections, aggregators, fusion, tanh) as a
        // function of the fusion weight
        let model = Model::new(small_cfg()).unwrap();
        let p = model.store.get("fusion.w").unwrap().clone();
        let t = Tensor::new(p.data.clone(), &p.shape).unwrap();
        let err = crate::autodiff::grad_check(
            move |g, w| {
                let mut binder = ParamBinder::new();
                binder_insert(&mut binder, "fusion.w", w);
                let (e_r, ..) = model
                    .encode_recipe(g, &mut binder, &[1, 2], &[vec![3, 4]], &[vec![5], vec![6, 7]])
                    .unwrap();
                let sq = g.mul(e_r, e_r)?;
                g.sum(sq, None)
            },
            &t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "recipe-path fusion.w grad err {err}");
    }

    // test-only access: pre-seed a binder with a replacement leaf
    fn binder_insert(binder: &mut ParamBinder, name: &str, id: NodeId) {
        binder.insert_bound(name, id);
    }

    #[test]
    fn frozen_backbone_invariance_after_restoring_heads() {
        let cfg = small_cfg();
        let reference = Model::new(cfg.clone()).unwrap();
        let mut trained = Model::new(cfg).unwrap();
        // simulate training: move every trainable parameter
        let names: Vec<String> = trained
            .store
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect();
        for n in &names {
            for v in trained.store.get_mut(n).unwrap().data.iter_mut() {
                *v += 0.1;
            }
        }
        let tokens = [2usize, 3, 5, 8];
        assert_ne!(
            encode_image_values(&reference, &tokens),
            encode_image_values(&trained, &tokens)
        );
        // restore trainable params: outputs must be bit-identical again
        for n in &names {
            let original = reference.store.get(n).unwrap().data.clone();
            trained.store.get_mut(n).unwrap().data = original;
        }
        assert_eq!(
            encode_image_values(&reference, &tokens),
            encode_image_values(&trained, &tokens)
        );
    }

    #[test]
    fn all_embeddings_have_dim_d() {
        let model = Model::new(small_cfg()).unwrap();
        let record = crate::data::SampleRecord {
            id: "x".into(),
            image_tokens: Some(vec![1, 2, 3]),
            title_tokens: vec![4, 5],
            ingredient_sentences: vec![vec![6, 7], vec![8]],
            instruction_sentences: vec![vec![9, 10]],
            segment_vectors: vec![vec![0.1; 8], vec![0.2; 8]],
            description_tokens: Some(vec![11, 12]),
            split: crate::data::Split::Test,
            paired: true,
        };
        let bundle = model.encode_bundle(&record).unwrap();
        assert_eq!(bundle.e_v.as_ref().unwrap().len(), 8);
        assert_eq!(bundle.e_r.len(), 8);
        assert_eq!(bundle.e_s.as_ref().unwrap().len(), 8);
        assert_eq!(bundle.e_d.as_ref().unwrap().len(), 8);
        assert_eq!(bundle.e_r_tit.len(), 8);
        assert_eq!(bundle.e_r_ing.len(), 8);
        assert_eq!(bundle.e_r_ins.len(), 8);
    }
}
