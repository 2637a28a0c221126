//! Dataset schema, deterministic synthetic corpus generation with planted
//! cross-modal correspondences, line-delimited serialization, and batch
//! iteration with paired/unpaired alternation.
//!
//! Every sample draws one latent concept. The vocabulary is partitioned into
//! per-concept image, recipe and shared blocks; image tokens come from the
//! image+shared blocks of the sample's concept, recipe sentences from
//! section-specific sub-ranges of the recipe block plus the shared block,
//! and description tokens overlap the image-side vocabulary. Segment vectors
//! are noisy copies of a per-concept unit direction.
//!
//! A `noise_rate` fraction of tokens is drawn uniformly from the whole
//! vocabulary instead.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("corpus format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("empty paired pool")]
    EmptyPairedPool,
    #[error("batch size {0} too small (need at least 2 for in-batch negatives)")]
    BatchTooSmall(usize),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

pub const MAX_SENTENCES: usize = 15;
pub const MAX_SENTENCE_TOKENS: usize = 20;
pub const MAX_SEGMENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::InvalidConfig(format!("unknown split {other}"))),
        }
    }
}

/// One training or evaluation example. Unpaired records are recipe-only:
/// no image tokens, segments or description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_tokens: Option<Vec<usize>>,
    pub title_tokens: Vec<usize>,
    pub ingredient_sentences: Vec<Vec<usize>>,
    pub instruction_sentences: Vec<Vec<usize>>,
    #[serde(default)]
    pub segment_vectors: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description_tokens: Option<Vec<usize>>,
    pub split: Split,
    pub paired: bool,
}

impl SampleRecord {
    /// Check the structural invariants against a vocabulary size and
    /// embedding dimension.
    pub fn validate(&self, vocab: usize, dim: usize) -> Result<()> {
        let fail = |reason: String| {
            Err(DataError::InvalidRecord {
                id: self.id.clone(),
                reason,
            })
        };
        if self.paired && self.image_tokens.is_none() {
            return fail("paired record without image tokens".into());
        }
        if !self.paired
            && (self.image_tokens.is_some()
                || !self.segment_vectors.is_empty()
                || self.description_tokens.is_some())
        {
            return fail("unpaired record carries image-side data".into());
        }
        if self.title_tokens.is_empty() {
            return fail("empty title".into());
        }
        for (name, sentences) in [
            ("ingredients", &self.ingredient_sentences),
            ("instructions", &self.instruction_sentences),
        ] {
            if sentences.is_empty() || sentences.len() > MAX_SENTENCES {
                return fail(format!("{name}: {} sentences", sentences.len()));
            }
            if sentences
                .iter()
                .any(|s| s.is_empty() || s.len() > MAX_SENTENCE_TOKENS)
            {
                return fail(format!("{name}: sentence length out of bounds"));
            }
        }
        if self.segment_vectors.len() > MAX_SEGMENTS {
            return fail(format!("{} segments", self.segment_vectors.len()));
        }
        if self.segment_vectors.iter().any(|v| v.len() != dim) {
            return fail("segment vector dimension mismatch".into());
        }
        let all_tokens = self
            .image_tokens
            .iter()
            .flatten()
            .chain(self.title_tokens.iter())
            .chain(self.ingredient_sentences.iter().flatten())
            .chain(self.instruction_sentences.iter().flatten())
            .chain(self.description_tokens.iter().flatten());
        for &t in all_tokens {
            if t >= vocab {
                return fail(format!("token id {t} >= vocab {vocab}"));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    pub concept_count: usize,
    pub embed_dim: usize,
    pub n_train_paired: usize,
    pub n_train_unpaired: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_rate: f64,
    pub tokens_per_image: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 200,
            concept_count: 64,
            embed_dim: 64,
            n_train_paired: 512,
            n_train_unpaired: 512,
            n_val: 128,
            n_test: 128,
            noise_rate: 0.1,
            tokens_per_image: 12,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concept_count == 0 || self.vocab_size == 0 {
            return Err(DataError::InvalidConfig("zero vocab or concepts".into()));
        }
        if self.concept_count * 3 > self.vocab_size {
            return Err(DataError::InvalidConfig(format!(
                "concept_count {} > vocab_size {} / 3",
                self.concept_count, self.vocab_size
            )));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(DataError::InvalidConfig(format!(
                "noise_rate {} outside [0, 0.5)",
                self.noise_rate
            )));
        }
        if self.tokens_per_image == 0 {
            return Err(DataError::InvalidConfig("tokens_per_image = 0".into()));
        }
        if self.embed_dim == 0 {
            return Err(DataError::InvalidConfig("embed_dim = 0".into()));
        }
        Ok(())
    }

    fn block_size(&self) -> usize {
        self.vocab_size / (3 * self.concept_count)
    }

    /// Token ranges owned by a concept: (image, recipe, shared).
    fn blocks(&self, concept: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.block_size();
        let c = self.concept_count;
        let img = concept * s..(concept + 1) * s;
        let rec = (c + concept) * s..(c + concept + 1) * s;
        let shared = (2 * c + concept) * s..(2 * c + concept + 1) * s;
        (img, rec, shared)
    }

    /// Whether `token` belongs to the image-side vocabulary (image or shared
    /// block) of `concept`; with noise_rate 0 every image token does.
    pub fn concept_owns_image_token(&self, concept: usize, token: usize) -> bool {
        let (img, _, shared) = self.blocks(concept);
        img.contains(&token) || shared.contains(&token)
    }
}

/// Immutable corpus: generator config plus records.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: SyntheticConfig,
    pub records: Vec<SampleRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn paired_train(&self) -> Vec<usize> {
        self.indices(|r| r.split == Split::Train && r.paired)
    }

    pub fn unpaired_train(&self) -> Vec<usize> {
        self.indices(|r| r.split == Split::Train && !r.paired)
    }

    fn indices(&self, pred: impl Fn(&SampleRecord) -> bool) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            r.validate(self.config.vocab_size, self.config.embed_dim)?;
            if !seen.insert(&r.id) {
                return Err(DataError::InvalidRecord {
                    id: r.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(())
    }
}

// ── generation ──────────────────────────────────────────────────────

fn pick(rng: &mut ChaCha8Rng, range: &std::ops::Range<usize>) -> usize {
    rng.gen_range(range.clone())
}

/// Draw one token: mostly from `primary`, sometimes from `shared`, with a
/// `noise_rate` chance of coming from anywhere in the vocabulary.
fn draw_token(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    primary: &std::ops::Range<usize>,
    shared: &std::ops::Range<usize>,
    shared_prob: f64,
) -> usize {
    if rng.gen_bool(cfg.noise_rate) {
        rng.gen_range(0..cfg.vocab_size)
    } else if rng.gen_bool(shared_prob) {
        pick(rng, shared)
    } else {
        pick(rng, primary)
    }
}

fn draw_sentence(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    primary: &std::ops::Range<usize>,
    shared: &std::ops::Range<usize>,
    len_range: std::ops::RangeInclusive<usize>,
) -> Vec<usize> {
    let len = rng.gen_range(len_range);
    (0..len)
        .map(|_| draw_token(rng, cfg, primary, shared, 0.3))
        .collect()
}

/// Sub-range of the recipe block assigned to one section. Degenerates to the
/// whole block when it is too small to split three ways.
fn section_range(block: &std::ops::Range<usize>, section: usize) -> std::ops::Range<usize> {
    let len = block.end - block.start;
    if len < 3 {
        return block.clone();
    }
    let third = len / 3;
    let start = block.start + section * third;
    let end = if section == 2 { block.end } else { start + third };
    start..end
}

/// Unit direction of a concept in embedding space, drawn from a dedicated
/// stream so it is independent of sample counters.
fn concept_direction(cfg: &SyntheticConfig, concept: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX - concept as u64);
    let mut v: Vec<f64> = (0..cfg.embed_dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn generate_record(cfg: &SyntheticConfig, counter: u64, id: String, split: Split, paired: bool) -> SampleRecord {
    // counter-based stream: generation order is irrelevant
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(counter);

    let concept = rng.gen_range(0..cfg.concept_count);
    let (img_block, rec_block, shared_block) = cfg.blocks(concept);

    let title_range = section_range(&rec_block, 0);
    let ing_range = section_range(&rec_block, 1);
    let ins_range = section_range(&rec_block, 2);

    let title_tokens = draw_sentence(&mut rng, cfg, &title_range, &shared_block, 3..=5);
    let n_ing = rng.gen_range(2..=4);
    let ingredient_sentences = (0..n_ing)
        .map(|_| draw_sentence(&mut rng, cfg, &ing_range, &shared_block, 3..=6))
        .collect();
    let n_ins = rng.gen_range(2..=4);
    let instruction_sentences = (0..n_ins)
        .map(|_| draw_sentence(&mut rng, cfg, &ins_range, &shared_block, 3..=6))
        .collect();

    let (image_tokens, segment_vectors, description_tokens) = if paired {
        let image: Vec<usize> = (0..cfg.tokens_per_image)
            .map(|_| draw_token(&mut rng, cfg, &img_block, &shared_block, 0.3))
            .collect();

        let direction = concept_direction(cfg, concept);
        let n_segments = rng.gen_range(2..=MAX_SEGMENTS);
        let segments: Vec<Vec<f64>> = (0..n_segments)
            .map(|_| {
                let mut v: Vec<f64> = direction
                    .iter()
                    .map(|&x| {
                        let noise: f64 = rng.sample(rand_distr::StandardNormal);
                        x + cfg.noise_rate * noise / (cfg.embed_dim as f64).sqrt()
                    })
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect();

        // description overlaps the image-side vocabulary: visual cues of the dish
        let description = draw_sentence(&mut rng, cfg, &img_block, &shared_block, 5..=8);
        (Some(image), segments, Some(description))
    } else {
        (None, Vec::new(), None)
    };

    SampleRecord {
        id,
        image_tokens,
        title_tokens,
        ingredient_sentences,
        instruction_sentences,
        segment_vectors,
        description_tokens,
        split,
        paired,
    }
}

/// Generate the full corpus. Sample `k` is produced by a counter-based
/// stream seeded with `(seed, k)`, so identical configs yield byte-identical
/// corpora regardless of generation order.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut records =
        Vec::with_capacity(cfg.n_train_paired + cfg.n_train_unpaired + cfg.n_val + cfg.n_test);
    let mut counter: u64 = 0;
    let mut emit = |n: usize, prefix: &str, split: Split, paired: bool, records: &mut Vec<SampleRecord>| {
        for i in 0..n {
            records.push(generate_record(
                cfg,
                counter,
                format!("{prefix}-{i:05}"),
                split,
                paired,
            ));
            counter += 1;
        }
    };
    emit(cfg.n_train_paired, "train", Split::Train, true, &mut records);
    emit(cfg.n_train_unpaired, "unpaired", Split::Train, false, &mut records);
    emit(cfg.n_val, "val", Split::Val, true, &mut records);
    emit(cfg.n_test, "test", Split::Test, true, &mut records);

    let corpus = Corpus {
        config: cfg.clone(),
        records,
    };
    corpus.validate()?;
    Ok(corpus)
}

// ── serialization ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    config: SyntheticConfig,
}

/// Write the corpus as line-delimited JSON: a header line with format
/// version and generator config, then one record per line.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let header = CorpusHeader {
        format: "cmr-corpus".into(),
        version: CORPUS_FORMAT_VERSION,
        config: corpus.config.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io_err)?;
    for r in &corpus.records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines.next().ok_or(DataError::Malformed {
        line: 1,
        reason: "missing header line".into(),
    })?;
    let header_line = header_line.map_err(io_err)?;
    let header: CorpusHeader = serde_json::from_str(&header_line).map_err(|e| DataError::Malformed {
        line: 1,
        reason: e.to_string(),
    })?;
    if header.version != CORPUS_FORMAT_VERSION {
        return Err(DataError::Version {
            found: header.version,
            expected: CORPUS_FORMAT_VERSION,
        });
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    let corpus = Corpus {
        config: header.config,
        records,
    };
    corpus.validate()?;
    Ok(corpus)
}

// ── batching ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Paired,
    Unpaired,
}

impl std::fmt::Display for BatchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchKind::Paired => write!(f, "paired"),
            BatchKind::Unpaired => write!(f, "unpaired"),
        }
    }
}

/// Indices into `corpus.records` for one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub kind: BatchKind,
    pub indices: Vec<usize>,
}

/// Epoch batch plan: paired and unpaired pools are shuffled independently
/// per `(seed, epoch)`, chunked, then interleaved P, U, P, U while both pools
/// last; the longer pool's remainder follows. Chunks smaller than 2 are
/// dropped (losses need in-batch negatives).
pub fn batches(
    corpus: &Corpus,
    paired_batch: usize,
    unpaired_batch: usize,
    use_unpaired: bool,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if paired_batch < 2 {
        return Err(DataError::BatchTooSmall(paired_batch));
    }
    if unpaired_batch < 2 {
        return Err(DataError::BatchTooSmall(unpaired_batch));
    }
    let mut paired = corpus.paired_train();
    if paired.is_empty() {
        return Err(DataError::EmptyPairedPool);
    }
    let mut unpaired = if use_unpaired {
        corpus.unpaired_train()
    } else {
        Vec::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64);
    paired.shuffle(&mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + 1);
    unpaired.shuffle(&mut rng);

    let chunk = |pool: &[usize], size: usize, kind: BatchKind| -> Vec<Batch> {
        pool.chunks(size)
            .filter(|c| c.len() >= 2)
            .map(|c| Batch {
                kind,
                indices: c.to_vec(),
            })
            .collect()
    };
    let mut p = chunk(&paired, paired_batch, BatchKind::Paired).into_iter();
    let mut u = chunk(&unpaired, unpaired_batch, BatchKind::Unpaired).into_iter();

    let mut plan = Vec::new();
    loop {
        match (p.next(), u.next()) {
            (Some(a), Some(b)) => {
                plan.push(a);
                plan.push(b);
            }
            (Some(a), None) => {
                plan.push(a);
                plan.extend(p.by_ref());
                break;
            }
            (None, Some(b)) => {
                plan.push(b);
                plan.extend(u.by_ref());
                break;
            }
            (None, None) => break,
        }
    }
    Ok(plan)
}
