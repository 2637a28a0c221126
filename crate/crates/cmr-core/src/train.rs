//! Training loop with paired/unpaired batch alternation, per-epoch
//! validation and best-checkpoint selection, checkpoint serialization,
//! split evaluation over fusion protocols, and the ablation matrix runner.
//!
//! Everything here is deterministic given a config and seed: batch order,
//! optimizer updates, log lines and reports reproduce byte-identically.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Graph, TensorError};
use crate::data::{batches, BatchKind, Corpus, DataError, SampleRecord, Split};
use crate::encoders::{EncoderError, Model, ModelConfig, SampleNodes};
use crate::layers::{lr_at_epoch, AdamConfig, AdamState, LayerError, ParamBinder, Parameter};
use crate::losses::{
    multi_level_loss, recipe_loss, BatchEmbeddings, CircleConfig, LossError, LossKind,
    MultiLevelConfig,
};
use crate::retrieval::{
    subset_protocol, Direction, FusionProtocol, RetrievalError, RetrievalReport, SplitEmbeddings,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss at epoch {epoch} batch {batch} ({kind})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        kind: BatchKind,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Full training configuration. `Default` documents the paper-scale values;
/// [`TrainConfig::desk`] is the minutes-scale setup used throughout the
/// tests.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub paired_batch: usize,
    pub unpaired_batch: usize,
    /// Pairwise objective: "circle" or "triplet" (triplet reuses `circle_m`
    /// as its margin).
    pub loss: String,
    pub circle_m: f64,
    pub circle_gamma: f64,
    pub circle_per_query: bool,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub use_segment_loss: bool,
    pub use_description_loss: bool,
    pub use_recipe_loss: bool,
    pub use_unpaired: bool,
    pub adapters_image: bool,
    pub adapters_recipe: bool,
    pub adapters_description: bool,
    pub adapter_attn_slot: bool,
    pub adapter_ff_slot: bool,
    pub instruction_positions: bool,
    pub dim: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub bottleneck: usize,
    pub aggregator_layers: usize,
    pub aggregator_heads: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Validation subset size; 0 means the whole validation split.
    pub val_subset_size: usize,
    pub val_n_subsets: usize,
    /// Direction whose validation R@1 drives checkpoint selection.
    pub checkpoint_direction: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 30,
            paired_batch: 128,
            unpaired_batch: 256,
            loss: "circle".into(),
            circle_m: 0.25,
            circle_gamma: 32.0,
            circle_per_query: true,
            alpha: 1.0,
            beta: 1.0,
            sigma: 1.0,
            use_segment_loss: true,
            use_description_loss: true,
            use_recipe_loss: true,
            use_unpaired: true,
            adapters_image: true,
            adapters_recipe: true,
            adapters_description: true,
            adapter_attn_slot: true,
            adapter_ff_slot: true,
            instruction_positions: false,
            dim: 512,
            backbone_layers: 2,
            backbone_heads: 2,
            vocab: 8192,
            max_positions: 32,
            bottleneck: 64,
            aggregator_layers: 2,
            aggregator_heads: 4,
            weight_decay: 0.0,
            grad_clip: 0.0,
            val_subset_size: 0,
            val_n_subsets: 1,
            checkpoint_direction: "i2r".into(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: the paper-scale schedule shrunk to run in minutes
    /// while keeping the alternation rule and loss structure.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            base_lr: 1e-3,
            paired_batch: 32,
            unpaired_batch: 64,
            dim: 64,
            bottleneck: 8,
            ..TrainConfig::default()
        }
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        match self.loss.as_str() {
            "circle" => Ok(LossKind::Circle),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(TrainError::Config(format!("unknown loss {other}"))),
        }
    }

    pub fn selection_direction(&self) -> Result<Direction> {
        Direction::parse(&self.checkpoint_direction).ok_or_else(|| {
            TrainError::Config(format!(
                "unknown checkpoint_direction {}",
                self.checkpoint_direction
            ))
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            backbone_layers: self.backbone_layers,
            backbone_heads: self.backbone_heads,
            vocab: self.vocab,
            max_positions: self.max_positions,
            bottleneck: self.bottleneck,
            aggregator_layers: self.aggregator_layers,
            aggregator_heads: self.aggregator_heads,
            adapters_image: self.adapters_image,
            adapters_recipe: self.adapters_recipe,
            adapters_description: self.adapters_description,
            adapter_attn_slot: self.adapter_attn_slot,
            adapter_ff_slot: self.adapter_ff_slot,
            instruction_positions: self.instruction_positions,
            seed: self.seed,
        }
    }

    pub fn circle_config(&self) -> CircleConfig {
        CircleConfig {
            m: self.circle_m,
            gamma: self.circle_gamma,
            per_query: self.circle_per_query,
        }
    }

    pub fn multi_level_config(&self) -> MultiLevelConfig {
        MultiLevelConfig {
            alpha: self.alpha,
            beta: self.beta,
            sigma: self.sigma,
            use_segment_loss: self.use_segment_loss,
            use_description_loss: self.use_description_loss,
            use_recipe_loss: self.use_recipe_loss,
        }
    }

    /// Key/value view in declaration order; the config file format, the
    /// override mechanism and the log echo all share these keys.
    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("paired_batch", self.paired_batch.to_string()),
            ("unpaired_batch", self.unpaired_batch.to_string()),
            ("loss", self.loss.clone()),
            ("circle_m", self.circle_m.to_string()),
            ("circle_gamma", self.circle_gamma.to_string()),
            ("circle_per_query", self.circle_per_query.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("sigma", self.sigma.to_string()),
            ("use_segment_loss", self.use_segment_loss.to_string()),
            ("use_description_loss", self.use_description_loss.to_string()),
            ("use_recipe_loss", self.use_recipe_loss.to_string()),
            ("use_unpaired", self.use_unpaired.to_string()),
            ("adapters_image", self.adapters_image.to_string()),
            ("adapters_recipe", self.adapters_recipe.to_string()),
            ("adapters_description", self.adapters_description.to_string()),
            ("adapter_attn_slot", self.adapter_attn_slot.to_string()),
            ("adapter_ff_slot", self.adapter_ff_slot.to_string()),
            ("instruction_positions", self.instruction_positions.to_string()),
            ("dim", self.dim.to_string()),
            ("backbone_layers", self.backbone_layers.to_string()),
            ("backbone_heads", self.backbone_heads.to_string()),
            ("vocab", self.vocab.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("bottleneck", self.bottleneck.to_string()),
            ("aggregator_layers", self.aggregator_layers.to_string()),
            ("aggregator_heads", self.aggregator_heads.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("val_subset_size", self.val_subset_size.to_string()),
            ("val_n_subsets", self.val_n_subsets.to_string()),
            ("checkpoint_direction", self.checkpoint_direction.clone()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Set one field by key. Used by the config file, `--set` CLI overrides
    /// and ablation rows.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: String| TrainError::Config(format!("key {key}: {e}"));
        macro_rules! parse {
            () => {
                value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            };
        }
        macro_rules! parse_f {
            () => {
                value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            };
        }
        macro_rules! parse_b {
            () => {
                value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?
            };
        }
        match key {
            "epochs" => self.epochs = parse!(),
            "base_lr" => self.base_lr = parse_f!(),
            "lr_decay" => self.lr_decay = parse_f!(),
            "lr_decay_every" => self.lr_decay_every = parse!(),
            "paired_batch" => self.paired_batch = parse!(),
            "unpaired_batch" => self.unpaired_batch = parse!(),
            "loss" => self.loss = value.to_string(),
            "circle_m" => self.circle_m = parse_f!(),
            "circle_gamma" => self.circle_gamma = parse_f!(),
            "circle_per_query" => self.circle_per_query = parse_b!(),
            "alpha" => self.alpha = parse_f!(),
            "beta" => self.beta = parse_f!(),
            "sigma" => self.sigma = parse_f!(),
            "use_segment_loss" => self.use_segment_loss = parse_b!(),
            "use_description_loss" => self.use_description_loss = parse_b!(),
            "use_recipe_loss" => self.use_recipe_loss = parse_b!(),
            "use_unpaired" => self.use_unpaired = parse_b!(),
            "adapters_image" => self.adapters_image = parse_b!(),
            "adapters_recipe" => self.adapters_recipe = parse_b!(),
            "adapters_description" => self.adapters_description = parse_b!(),
            "adapter_attn_slot" => self.adapter_attn_slot = parse_b!(),
            "adapter_ff_slot" => self.adapter_ff_slot = parse_b!(),
            "instruction_positions" => self.instruction_positions = parse_b!(),
            "dim" => self.dim = parse!(),
            "backbone_layers" => self.backbone_layers = parse!(),
            "backbone_heads" => self.backbone_heads = parse!(),
            "vocab" => self.vocab = parse!(),
            "max_positions" => self.max_positions = parse!(),
            "bottleneck" => self.bottleneck = parse!(),
            "aggregator_layers" => self.aggregator_layers = parse!(),
            "aggregator_heads" => self.aggregator_heads = parse!(),
            "weight_decay" => self.weight_decay = parse_f!(),
            "grad_clip" => self.grad_clip = parse_f!(),
            "val_subset_size" => self.val_subset_size = parse!(),
            "val_n_subsets" => self.val_n_subsets = parse!(),
            "checkpoint_direction" => self.checkpoint_direction = value.to_string(),
            "seed" => self.seed = parse!(),
            other => return Err(TrainError::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file ('#' starts a comment).
    pub fn from_file(path: impl AsRef<Path>, base: TrainConfig) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_kv_text(&text, base)
    }

    pub fn from_kv_text(text: &str, mut base: TrainConfig) -> Result<TrainConfig> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            base.apply_override(key.trim(), value.trim())?;
        }
        Ok(base)
    }
}

/// Named parameter snapshot with config, epoch and validation score.
/// Loading restores evaluation outputs bit-identically.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs at snapshot time (0 = initialization).
    pub epoch: usize,
    pub val_r1: f64,
    pub params: Vec<Parameter>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CMRCKPT1";

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig, epoch: usize, val_r1: f64) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            val_r1,
            params: model
                .store
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.clone(),
                    trainable: p.trainable,
                    grad: None,
                })
                .collect(),
        }
    }

    /// Rebuild the model and overwrite every parameter with the snapshot.
    pub fn build_model(&self) -> Result<Model> {
        let model = Model::new(self.config.model_config())?;
        self.restore_into(model)
    }

    fn restore_into(&self, mut model: Model) -> Result<Model> {
        if model.store.len() != self.params.len() {
            return Err(TrainError::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for p in &self.params {
            let target = model
                .store
                .get_mut(&p.name)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            if target.shape != p.shape {
                return Err(TrainError::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    p.name, target.shape, p.shape
                )));
            }
            target.data = p.data.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err);
        put(CHECKPOINT_MAGIC)?;
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        put(&(config.len() as u64).to_le_bytes())?;
        put(&config)?;
        put(&(self.epoch as u64).to_le_bytes())?;
        put(&self.val_r1.to_le_bytes())?;
        put(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            put(&(p.name.len() as u64).to_le_bytes())?;
            put(p.name.as_bytes())?;
            put(&[p.trainable as u8])?;
            put(&(p.shape.len() as u64).to_le_bytes())?;
            for &d in &p.shape {
                put(&(d as u64).to_le_bytes())?;
            }
            for &v in &p.data {
                put(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let io_err = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8).map_err(io_err)?;
        if &buf8 != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let read_u64 = |r: &mut dyn Read| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|source| TrainError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok(u64::from_le_bytes(b))
        };
        let config_len = read_u64(&mut r)? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes).map_err(io_err)?;
        let config: TrainConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| TrainError::Checkpoint(format!("config: {e}")))?;
        let epoch = read_u64(&mut r)? as usize;
        let mut f8 = [0u8; 8];
        r.read_exact(&mut f8).map_err(io_err)?;
        let val_r1 = f64::from_le_bytes(f8);
        let n_params = read_u64(&mut r)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = read_u64(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io_err)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(io_err)?;
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut f8).map_err(io_err)?;
                data.push(f64::from_le_bytes(f8));
            }
            params.push(Parameter {
                name,
                shape,
                data,
                trainable: flag[0] != 0,
                grad: None,
            });
        }
        Ok(Checkpoint {
            config,
            epoch,
            val_r1,
            params,
        })
    }
}

/// Training artifacts: the selected checkpoint and the full deterministic
/// log.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: String,
    pub final_model: Model,
}

fn format_f(v: f64) -> String {
    // shortest round-trip decimal form; deterministic across runs
    format!("{v}")
}

/// Stack per-sample `[d]` nodes into a `[B×d]` matrix.
fn stack_rows(
    g: &mut Graph,
    nodes: &[crate::autodiff::NodeId],
    dim: usize,
) -> std::result::Result<crate::autodiff::NodeId, TensorError> {
    let rows: Vec<crate::autodiff::NodeId> = nodes
        .iter()
        .map(|&n| g.reshape(n, &[1, dim]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    g.concat(&rows, 0)
}

fn encode_batch(
    model: &Model,
    g: &mut Graph,
    binder: &mut ParamBinder,
    records: &[&SampleRecord],
    paired: bool,
) -> Result<BatchEmbeddings> {
    let dim = model.cfg.dim;
    let mut nodes: Vec<SampleNodes> = Vec::with_capacity(records.len());
    for r in records {
        nodes.push(model.encode_sample(g, binder, r)?);
    }
    let e_r = stack_rows(g, &nodes.iter().map(|n| n.e_r).collect::<Vec<_>>(), dim)?;
    let tit = stack_rows(g, &nodes.iter().map(|n| n.e_r_tit).collect::<Vec<_>>(), dim)?;
    let ing = stack_rows(g, &nodes.iter().map(|n| n.e_r_ing).collect::<Vec<_>>(), dim)?;
    let ins = stack_rows(g, &nodes.iter().map(|n| n.e_r_ins).collect::<Vec<_>>(), dim)?;

    let (e_v, e_s, e_d) = if paired {
        let v: Option<Vec<_>> = nodes.iter().map(|n| n.e_v).collect();
        let s: Option<Vec<_>> = nodes.iter().map(|n| n.e_s).collect();
        let d: Option<Vec<_>> = nodes.iter().map(|n| n.e_d).collect();
        (
            Some(stack_rows(g, &v.ok_or_else(|| {
                TrainError::Config("paired batch contains sample without image".into())
            })?, dim)?),
            s.map(|s| stack_rows(g, &s, dim)).transpose()?,
            d.map(|d| stack_rows(g, &d, dim)).transpose()?,
        )
    } else {
        (None, None, None)
    };

    Ok(BatchEmbeddings {
        e_v: e_v.unwrap_or(e_r), // only read on paired batches
        e_r,
        e_s,
        e_d,
        e_r_tit: tit,
        e_r_ing: ing,
        e_r_ins: ins,
    })
}

/// Run the training loop and return the checkpoint with the highest
/// validation R@1 in the configured direction (ties keep the earliest).
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    if cfg.vocab < corpus.config.vocab_size {
        return Err(TrainError::Config(format!(
            "model vocab {} smaller than corpus vocab {}",
            cfg.vocab, corpus.config.vocab_size
        )));
    }
    if cfg.dim != corpus.config.embed_dim {
        return Err(TrainError::Config(format!(
            "model dim {} differs from corpus embed_dim {} (segment vectors)",
            cfg.dim, corpus.config.embed_dim
        )));
    }
    let kind = cfg.loss_kind()?;
    let selection = cfg.selection_direction()?;
    let circle = cfg.circle_config();
    let ml = cfg.multi_level_config();
    circle.validate().map_err(TrainError::Loss)?;

    let mut model = Model::new(cfg.model_config())?;
    let mut adam = AdamState::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
        ..AdamConfig::default()
    });

    let mut log = String::new();
    for (k, v) in cfg.kv_pairs() {
        writeln!(log, "config {k}={v}").unwrap();
    }
    let (trainable, frozen) = model.count_params();
    let ratio = trainable as f64 / (trainable + frozen) as f64;
    writeln!(
        log,
        "params trainable={trainable} frozen={frozen} ratio={}",
        format_f(ratio)
    )
    .unwrap();
    let initial_frozen_hash = model.store.frozen_hash();
    writeln!(log, "frozen_hash {initial_frozen_hash:016x}").unwrap();

    // request unpaired batches only when the recipe loss can use them
    let want_unpaired = cfg.use_unpaired && cfg.use_recipe_loss;

    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let evaluate_val = |model: &Model, epoch: usize, log: &mut String| -> Result<f64> {
        let val = corpus.split(Split::Val);
        if val.is_empty() {
            return Err(TrainError::Config("corpus has no validation split".into()));
        }
        let emb = encode_split(model, &val)?;
        let subset = if cfg.val_subset_size == 0 {
            emb.len()
        } else {
            cfg.val_subset_size
        };
        let i2r = subset_protocol(
            &emb,
            Direction::ImageToRecipe,
            FusionProtocol::Car,
            subset,
            cfg.val_n_subsets,
            cfg.seed,
        )?;
        let r2i = subset_protocol(
            &emb,
            Direction::RecipeToImage,
            FusionProtocol::Car,
            subset,
            cfg.val_n_subsets,
            cfg.seed,
        )?;
        writeln!(
            log,
            "val epoch={epoch} i2r_r1={} i2r_medr={} r2i_r1={} r2i_medr={} frozen_hash={:016x}",
            format_f(i2r.mean.r1),
            format_f(i2r.mean.med_r),
            format_f(r2i.mean.r1),
            format_f(r2i.mean.med_r),
            model.store.frozen_hash(),
        )
        .unwrap();
        Ok(match selection {
            Direction::ImageToRecipe => i2r.mean.r1,
            Direction::RecipeToImage => r2i.mean.r1,
        })
    };

    if cfg.epochs == 0 {
        let r1 = evaluate_val(&model, 0, &mut log)?;
        let ckpt = Checkpoint::from_model(&model, cfg, 0, r1);
        writeln!(log, "best epoch=0 val_r1={}", format_f(r1)).unwrap();
        return Ok(TrainOutcome {
            checkpoint: ckpt,
            log,
            final_model: model,
        });
    }

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.base_lr, epoch, cfg.lr_decay, cfg.lr_decay_every);
        let plan = batches(
            corpus,
            cfg.paired_batch,
            cfg.unpaired_batch,
            want_unpaired,
            cfg.seed,
            epoch,
        )?;
        for (step, batch) in plan.iter().enumerate() {
            let records: Vec<&SampleRecord> =
                batch.indices.iter().map(|&i| &corpus.records[i]).collect();
            let mut g = Graph::new();
            let mut binder = ParamBinder::new();
            // forward pass borrows the model immutably; the graph holds
            // copies, so the optimizer below can mutate the store freely
            let (total, line) = match batch.kind {
                BatchKind::Paired => {
                    let emb = encode_batch(&model, &mut g, &mut binder, &records, true)?;
                    let (total, b) = multi_level_loss(
                        &mut g,
                        &mut binder,
                        &model.store,
                        &emb,
                        &ml,
                        &circle,
                        kind,
                        &model.section_projection,
                    )?;
                    let fmt_opt = |v: Option<f64>| v.map(format_f).unwrap_or_else(|| "-".into());
                    let line = format!(
                        "loss epoch={epoch} step={step} kind=paired lr={} total={} pair={} segment={} description={} recipe={}",
                        format_f(lr),
                        format_f(b.total),
                        format_f(b.pair),
                        fmt_opt(b.segment),
                        fmt_opt(b.description),
                        fmt_opt(b.recipe),
                    );
                    (total, line)
                }
                BatchKind::Unpaired => {
                    let emb = encode_batch(&model, &mut g, &mut binder, &records, false)?;
                    let rec = recipe_loss(
                        &mut g,
                        &mut binder,
                        &model.store,
                        [emb.e_r_tit, emb.e_r_ing, emb.e_r_ins],
                        &model.section_projection,
                        kind,
                        &circle,
                    )?;
                    let total = g.scale(rec, cfg.sigma);
                    let line = format!(
                        "loss epoch={epoch} step={step} kind=unpaired lr={} total={} recipe={}",
                        format_f(lr),
                        format_f(g.data(total)[0]),
                        format_f(g.data(rec)[0]),
                    );
                    (total, line)
                }
            };
            if !g.data(total)[0].is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: step,
                    kind: batch.kind,
                });
            }
            g.backward(total)?;
            binder.harvest_grads(&g, &mut model.store)?;
            let names = binder.touched_trainable(&model.store);
            adam.step(&mut model.store, &names, lr)?;

            log.push_str(&line);
            log.push('\n');
        }

        let r1 = evaluate_val(&model, epoch + 1, &mut log)?;
        let improved = match &best {
            None => true,
            Some((best_r1, _, _)) => r1 > *best_r1,
        };
        if improved {
            best = Some((r1, epoch + 1, Checkpoint::from_model(&model, cfg, epoch + 1, r1)));
        }
    }

    let (best_r1, best_epoch, checkpoint) = best.expect("at least one epoch ran");
    writeln!(log, "best epoch={best_epoch} val_r1={}", format_f(best_r1)).unwrap();
    debug_assert_eq!(model.store.frozen_hash(), initial_frozen_hash);
    Ok(TrainOutcome {
        checkpoint,
        log,
        final_model: model,
    })
}

/// Encode a whole split in one graph (no gradients) and collect the
/// embedding rows for evaluation.
pub fn encode_split(model: &Model, records: &[&SampleRecord]) -> Result<SplitEmbeddings> {
    let mut g = Graph::new();
    let mut binder = ParamBinder::new();
    let mut ids = Vec::with_capacity(records.len());
    let mut image = Vec::with_capacity(records.len());
    let mut recipe = Vec::with_capacity(records.len());
    let mut description: Vec<Vec<f64>> = Vec::new();
    let mut segments: Vec<Vec<f64>> = Vec::new();
    let mut all_desc = true;
    let mut all_seg = true;
    for r in records {
        let nodes = model.encode_sample(&mut g, &mut binder, r)?;
        ids.push(r.id.clone());
        let e_v = nodes.e_v.ok_or_else(|| {
            TrainError::Config(format!("sample {} has no image for evaluation", r.id))
        })?;
        image.push(g.data(e_v).to_vec());
        recipe.push(g.data(nodes.e_r).to_vec());
        match nodes.e_d {
            Some(id) if all_desc => description.push(g.data(id).to_vec()),
            _ => all_desc = false,
        }
        match nodes.e_s {
            Some(id) if all_seg => segments.push(g.data(id).to_vec()),
            _ => all_seg = false,
        }
    }
    Ok(SplitEmbeddings {
        ids,
        image,
        recipe,
        description: all_desc.then_some(description),
        segments: all_seg.then_some(segments),
    })
}

/// Evaluate a model on one split for every (direction, protocol) pair.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    protocols: &[FusionProtocol],
    directions: &[Direction],
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<Vec<RetrievalReport>> {
    let records = corpus.split(split);
    if records.is_empty() {
        return Err(TrainError::Config(format!("split {split} is empty")));
    }
    let emb = encode_split(model, &records)?;
    // 0 means the whole split; explicit oversizes surface as errors below
    let subset = if subset_size == 0 { emb.len() } else { subset_size };
    let mut reports = Vec::new();
    for &direction in directions {
        for &protocol in protocols {
            reports.push(subset_protocol(
                &emb, direction, protocol, subset, n_subsets, seed,
            )?);
        }
    }
    Ok(reports)
}

// ── report rendering ────────────────────────────────────────────────

/// Aligned-column summary table of report means.
pub fn report_table(reports: &[RetrievalReport]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<10} {:<8} {:>8} {:>8} {:>8} {:>8}  (mean over {} subsets of {})",
        "direction",
        "protocol",
        "medR",
        "R@1",
        "R@5",
        "R@10",
        reports.first().map(|r| r.n_subsets).unwrap_or(0),
        reports.first().map(|r| r.subset_size).unwrap_or(0),
    )
    .unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<10} {:<8} {:>8.2} {:>8.4} {:>8.4} {:>8.4}",
            r.direction.tag(),
            r.protocol.tag(),
            r.mean.med_r,
            r.mean.r1,
            r.mean.r5,
            r.mean.r10,
        )
        .unwrap();
    }
    out
}

/// CSV rows: one per (direction, protocol, metric, subset) plus mean rows.
pub fn report_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from("direction,protocol,metric,subset,value\n");
    for r in reports {
        let metrics = |m: &crate::retrieval::Metrics| {
            [
                ("medR", m.med_r),
                ("R@1", m.r1),
                ("R@5", m.r5),
                ("R@10", m.r10),
            ]
        };
        for (s, m) in r.per_subset.iter().enumerate() {
            for (name, v) in metrics(m) {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.direction.tag(),
                    r.protocol.tag(),
                    name,
                    s,
                    format_f(v)
                )
                .unwrap();
            }
        }
        for (name, v) in metrics(&r.mean) {
            writeln!(
                out,
                "{},{},{},mean,{}",
                r.direction.tag(),
                r.protocol.tag(),
                name,
                format_f(v)
            )
            .unwrap();
        }
    }
    out
}

// ── ablation runner ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

/// Parse an ablation matrix file: one row per line,
/// `label: key=value key=value ...`; '#' starts a comment.
pub fn parse_ablation_matrix(text: &str) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (label, rest) = line.split_once(':').ok_or_else(|| {
            TrainError::Config(format!("line {}: expected 'label: overrides'", i + 1))
        })?;
        let label = label.trim().to_string();
        if !seen.insert(label.clone()) {
            return Err(TrainError::Config(format!("duplicate ablation label {label}")));
        }
        let mut overrides = Vec::new();
        for part in rest.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: bad override {part:?}", i + 1))
            })?;
            overrides.push((k.to_string(), v.to_string()));
        }
        rows.push(AblationRow { label, overrides });
    }
    Ok(rows)
}

pub struct AblationResult {
    pub label: String,
    pub val_r1: f64,
    pub reports: Vec<RetrievalReport>,
}

/// Train and evaluate every row of the matrix with a shared seed; reports
/// use protocol CAR in both directions on the test split.
pub fn ablation_matrix(
    base: &TrainConfig,
    corpus: &Corpus,
    rows: &[AblationRow],
    subset_size: usize,
    n_subsets: usize,
    eval_seed: u64,
) -> Result<Vec<AblationResult>> {
    let mut seen = std::collections::HashSet::new();
    for row in rows {
        if !seen.insert(row.label.clone()) {
            return Err(TrainError::Config(format!(
                "duplicate ablation label {}",
                row.label
            )));
        }
    }
    let mut results = Vec::new();
    for row in rows {
        let mut cfg = base.clone();
        for (k, v) in &row.overrides {
            cfg.apply_override(k, v)?;
        }
        let outcome = train(&cfg, corpus)?;
        let model = outcome.checkpoint.build_model()?;
        let reports = evaluate(
            &model,
            corpus,
            Split::Test,
            &[FusionProtocol::Car],
            &[Direction::ImageToRecipe, Direction::RecipeToImage],
            subset_size,
            n_subsets,
            eval_seed,
        )?;
        results.push(AblationResult {
            label: row.label.clone(),
            val_r1: outcome.checkpoint.val_r1,
            reports,
        });
    }
    Ok(results)
}

/// Consolidated ablation table keyed by row label.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<16} {:>8} | {:>8} {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8}",
        "row", "val_R@1", "i2r_medR", "i2r_R@1", "i2r_R@5", "i2r_R@10", "r2i_medR", "r2i_R@1",
        "r2i_R@5", "r2i_R@10"
    )
    .unwrap();
    for r in results {
        let find = |d: Direction| {
            r.reports
                .iter()
                .find(|rep| rep.direction == d)
                .map(|rep| rep.mean)
                .unwrap_or(crate::retrieval::Metrics {
                    med_r: f64::NAN,
                    r1: f64::NAN,
                    r5: f64::NAN,
                    r10: f64::NAN,
                })
        };
        let i2r = find(Direction::ImageToRecipe);
        let r2i = find(Direction::RecipeToImage);
        writeln!(
            out,
            "{:<16} {:>8.4} | {:>8.2} {:>8.4} {:>8.4} {:>8.4} | {:>8.2} {:>8.4} {:>8.4} {:>8.4}",
            r.label, r.val_r1, i2r.med_r, i2r.r1, i2r.r5, i2r.r10, r2i.med_r, r2i.r1, r2i.r5,
            r2i.r10
        )
        .unwrap();
    }
    out
}
