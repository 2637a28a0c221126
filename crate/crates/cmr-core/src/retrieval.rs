//! Similarity ranking and evaluation: cosine distance matrices, medR and
//! R@K, the seeded n-subset sampling protocol, and the late-fusion distance
//! products (CAR multiplies one factor, CAR+ two, CAR++ three).
//!
//! Ranking is deterministic: ties are broken by candidate id, so reports are
//! reproducible and the optimized ranking path can be checked for exact
//! equality against a naive full-sort oracle.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("distance matrices misaligned: {0}")]
    Misaligned(String),
    #[error("query {0} has no truth mapping")]
    MissingTruth(usize),
    #[error("protocol {protocol} requires {modality} embeddings")]
    MissingModality {
        protocol: &'static str,
        modality: &'static str,
    },
    #[error("subset size {subset} exceeds corpus size {corpus}")]
    SubsetTooLarge { subset: usize, corpus: usize },
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

/// Retrieval direction; determines which modality queries and which is
/// ranked as candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ImageToRecipe,
    RecipeToImage,
}

impl Direction {
    pub fn tag(&self) -> &'static str {
        match self {
            Direction::ImageToRecipe => "i2r",
            Direction::RecipeToImage => "r2i",
        }
    }

    pub fn parse(s: &str) -> Option<Direction> {
        match s {
            "i2r" => Some(Direction::ImageToRecipe),
            "r2i" => Some(Direction::RecipeToImage),
            _ => None,
        }
    }
}

/// Late-fusion evaluation protocol: how many distance factors multiply into
/// the final ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionProtocol {
    /// Image-recipe distance only.
    Car,
    /// Image-recipe times description distance.
    CarPlus,
    /// Image-recipe times description times segment distance.
    CarPlusPlus,
}

impl FusionProtocol {
    pub fn tag(&self) -> &'static str {
        match self {
            FusionProtocol::Car => "car",
            FusionProtocol::CarPlus => "car+",
            FusionProtocol::CarPlusPlus => "car++",
        }
    }

    pub fn parse(s: &str) -> Option<FusionProtocol> {
        match s {
            "car" => Some(FusionProtocol::Car),
            "car+" => Some(FusionProtocol::CarPlus),
            "car++" => Some(FusionProtocol::CarPlusPlus),
            _ => None,
        }
    }
}

/// `[Q×C]` cosine distances with id metadata and the query→candidate truth
/// mapping. Distances live in `[0, 2]`; zero-norm embeddings contribute
/// similarity 0, hence distance 1.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub n_queries: usize,
    pub n_candidates: usize,
    pub values: Vec<f64>,
    pub query_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    /// Truth candidate index per query.
    pub truth: Vec<usize>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < crate::autodiff::ZERO_NORM_EPS || nb < crate::autodiff::ZERO_NORM_EPS {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Entry `(i, j)` is `1 − cos(q_i, c_j)`.
pub fn distance_matrix(
    queries: &[Vec<f64>],
    candidates: &[Vec<f64>],
    query_ids: Vec<String>,
    candidate_ids: Vec<String>,
    truth: Vec<usize>,
) -> Result<DistanceMatrix> {
    if queries.is_empty() {
        return Err(RetrievalError::Empty("query"));
    }
    if candidates.is_empty() {
        return Err(RetrievalError::Empty("candidate"));
    }
    let d = queries[0].len();
    for v in queries.iter().chain(candidates) {
        if v.len() != d {
            return Err(RetrievalError::DimMismatch {
                left: d,
                right: v.len(),
            });
        }
    }
    let (q, c) = (queries.len(), candidates.len());
    let mut values = Vec::with_capacity(q * c);
    for qi in queries {
        for ci in candidates {
            values.push(1.0 - cosine(qi, ci));
        }
    }
    Ok(DistanceMatrix {
        n_queries: q,
        n_candidates: c,
        values,
        query_ids,
        candidate_ids,
        truth,
    })
}

/// Elementwise product of the protocol's distance factors. The auxiliary
/// factors are direction-specific: the description distance pairs the image
/// side with `E_D`, the segment distance pairs `E_S` with the recipe side;
/// callers assemble them accordingly.
pub fn fuse(
    protocol: FusionProtocol,
    dist_ir: &DistanceMatrix,
    dist_id: Option<&DistanceMatrix>,
    dist_sr: Option<&DistanceMatrix>,
) -> Result<DistanceMatrix> {
    let mut out = dist_ir.clone();
    let mut multiply = |factor: &DistanceMatrix| -> Result<()> {
        if factor.n_queries != out.n_queries || factor.n_candidates != out.n_candidates {
            return Err(RetrievalError::Misaligned(format!(
                "{}x{} vs {}x{}",
                factor.n_queries, factor.n_candidates, out.n_queries, out.n_candidates
            )));
        }
        if factor.query_ids != out.query_ids || factor.candidate_ids != out.candidate_ids {
            return Err(RetrievalError::Misaligned("id mismatch".into()));
        }
        for (v, f) in out.values.iter_mut().zip(&factor.values) {
            *v *= f;
        }
        Ok(())
    };
    match protocol {
        FusionProtocol::Car => {}
        FusionProtocol::CarPlus => {
            multiply(dist_id.ok_or(RetrievalError::MissingModality {
                protocol: "car+",
                modality: "description",
            })?)?;
        }
        FusionProtocol::CarPlusPlus => {
            multiply(dist_id.ok_or(RetrievalError::MissingModality {
                protocol: "car++",
                modality: "description",
            })?)?;
            multiply(dist_sr.ok_or(RetrievalError::MissingModality {
                protocol: "car++",
                modality: "segments",
            })?)?;
        }
    }
    Ok(out)
}

/// Rank of the truth candidate for one query: 1 plus the number of
/// candidates strictly closer, or equally close with a smaller id.
pub fn rank_of_truth(dm: &DistanceMatrix, query: usize) -> Result<usize> {
    let truth = *dm.truth.get(query).ok_or(RetrievalError::MissingTruth(query))?;
    if truth >= dm.n_candidates {
        return Err(RetrievalError::MissingTruth(query));
    }
    let row = &dm.values[query * dm.n_candidates..(query + 1) * dm.n_candidates];
    let truth_dist = row[truth];
    let truth_id = &dm.candidate_ids[truth];
    let mut rank = 1;
    for (j, &d) in row.iter().enumerate() {
        if j == truth {
            continue;
        }
        if d < truth_dist || (d == truth_dist && dm.candidate_ids[j] < *truth_id) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// medR and R@{1,5,10} for one distance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub med_r: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Metrics {
    pub fn recall_at(&self, k: usize) -> f64 {
        match k {
            1 => self.r1,
            5 => self.r5,
            10 => self.r10,
            _ => f64::NAN,
        }
    }
}

pub fn metrics_from_ranks(ranks: &[usize]) -> Metrics {
    assert!(!ranks.is_empty());
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let med_r = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    Metrics {
        med_r,
        r1: frac(1),
        r5: frac(5),
        r10: frac(10),
    }
}

/// medR (median of ranks; even counts average the central pair) and R@K
/// (fraction of queries with rank ≤ K).
pub fn metrics(dm: &DistanceMatrix) -> Result<Metrics> {
    let ranks = (0..dm.n_queries)
        .map(|q| rank_of_truth(dm, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics_from_ranks(&ranks))
}

/// All embeddings of one evaluation split, row-aligned by sample.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    pub ids: Vec<String>,
    pub image: Vec<Vec<f64>>,
    pub recipe: Vec<Vec<f64>>,
    /// Per-sample description embeddings; required by CAR+ and CAR++.
    pub description: Option<Vec<Vec<f64>>>,
    /// Per-sample segment embeddings; required by CAR++.
    pub segments: Option<Vec<Vec<f64>>>,
}

impl SplitEmbeddings {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn select(rows: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| rows[i].clone()).collect()
    }

    /// Fused distance matrix over a subset of the pairs, for one direction
    /// and protocol. Queries and candidates are both restricted to the
    /// subset; truth is the identity pairing.
    pub fn fused_distances(
        &self,
        idx: &[usize],
        direction: Direction,
        protocol: FusionProtocol,
    ) -> Result<DistanceMatrix> {
        let ids: Vec<String> = idx.iter().map(|&i| self.ids[i].clone()).collect();
        let truth: Vec<usize> = (0..idx.len()).collect();
        let image = Self::select(&self.image, idx);
        let recipe = Self::select(&self.recipe, idx);

        let need_desc = matches!(protocol, FusionProtocol::CarPlus | FusionProtocol::CarPlusPlus);
        let need_seg = matches!(protocol, FusionProtocol::CarPlusPlus);
        let description = if need_desc {
            Some(Self::select(
                self.description.as_ref().ok_or(RetrievalError::MissingModality {
                    protocol: protocol.tag(),
                    modality: "description",
                })?,
                idx,
            ))
        } else {
            None
        };
        let segments = if need_seg {
            Some(Self::select(
                self.segments.as_ref().ok_or(RetrievalError::MissingModality {
                    protocol: protocol.tag(),
                    modality: "segments",
                })?,
                idx,
            ))
        } else {
            None
        };

        let dm = |q: &[Vec<f64>], c: &[Vec<f64>]| {
            distance_matrix(q, c, ids.clone(), ids.clone(), truth.clone())
        };
        // Factor orientation per direction: the description embedding lives
        // on the recipe side of a pair, the segment embedding on the image
        // side.
        let (dist_ir, dist_id, dist_sr) = match direction {
            Direction::ImageToRecipe => (
                dm(&image, &recipe)?,
                description.as_deref().map(|d| dm(&image, d)).transpose()?,
                segments.as_deref().map(|s| dm(s, &recipe)).transpose()?,
            ),
            Direction::RecipeToImage => (
                dm(&recipe, &image)?,
                description.as_deref().map(|d| dm(d, &image)).transpose()?,
                segments.as_deref().map(|s| dm(&recipe, s)).transpose()?,
            ),
        };
        fuse(protocol, &dist_ir, dist_id.as_ref(), dist_sr.as_ref())
    }
}

/// Evaluation report for one (direction, protocol): per-subset metrics and
/// their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub protocol: FusionProtocol,
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
    pub per_subset: Vec<Metrics>,
    pub mean: Metrics,
}

impl RetrievalReport {
    pub fn mean_of(per_subset: &[Metrics]) -> Metrics {
        let n = per_subset.len() as f64;
        Metrics {
            med_r: per_subset.iter().map(|m| m.med_r).sum::<f64>() / n,
            r1: per_subset.iter().map(|m| m.r1).sum::<f64>() / n,
            r5: per_subset.iter().map(|m| m.r5).sum::<f64>() / n,
            r10: per_subset.iter().map(|m| m.r10).sum::<f64>() / n,
        }
    }
}

/// Draw `n_subsets` seeded subsets of pairs without replacement, compute
/// metrics within each (queries and candidates both restricted to the
/// subset), and report per-subset values plus their mean.
pub fn subset_protocol(
    embeddings: &SplitEmbeddings,
    direction: Direction,
    protocol: FusionProtocol,
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let n = embeddings.len();
    if n == 0 {
        return Err(RetrievalError::Empty("split"));
    }
    if subset_size > n || subset_size == 0 {
        return Err(RetrievalError::SubsetTooLarge {
            subset: subset_size,
            corpus: n,
        });
    }
    let mut per_subset = Vec::with_capacity(n_subsets);
    for s in 0..n_subsets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        indices.truncate(subset_size);
        let dm = embeddings.fused_distances(&indices, direction, protocol)?;
        per_subset.push(metrics(&dm)?);
    }
    let mean = RetrievalReport::mean_of(&per_subset);
    Ok(RetrievalReport {
        direction,
        protocol,
        subset_size,
        n_subsets,
        seed,
        per_subset,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s-{i:03}")).collect()
    }

    #[test]
    fn distance_extremes() {
        let q = vec![vec![1.0, 0.0]];
        let same = distance_matrix(&q, &[vec![2.0, 0.0]], ids(1), ids(1), vec![0]).unwrap();
        assert!(same.values[0].abs() < 1e-15);

        let ortho = distance_matrix(&q, &[vec![0.0, 1.0]], ids(1), ids(1), vec![0]).unwrap();
        assert!((ortho.values[0] - 1.0).abs() < 1e-15);

        let anti = distance_matrix(&q, &[vec![-3.0, 0.0]], ids(1), ids(1), vec![0]).unwrap();
        assert!((anti.values[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_maps_to_distance_one() {
        let dm = distance_matrix(
            &[vec![0.0, 0.0]],
            &[vec![1.0, 0.0]],
            ids(1),
            ids(1),
            vec![0],
        )
        .unwrap();
        assert_eq!(dm.values[0], 1.0);
    }

    #[test]
    fn empty_inputs_error() {
        assert!(distance_matrix(&[], &[vec![1.0]], vec![], ids(1), vec![]).is_err());
        assert!(distance_matrix(&[vec![1.0]], &[], ids(1), vec![], vec![0]).is_err());
    }

    fn dm_from_row(row: Vec<f64>, truth: usize) -> DistanceMatrix {
        let c = row.len();
        DistanceMatrix {
            n_queries: 1,
            n_candidates: c,
            values: row,
            query_ids: ids(1),
            candidate_ids: ids(c),
            truth: vec![truth],
        }
    }

    #[test]
    fn rank_brute_force_example() {
        let dm = dm_from_row(vec![0.3, 0.1, 0.5, 0.2, 0.4], 0);
        assert_eq!(rank_of_truth(&dm, 0).unwrap(), 3);
    }

    #[test]
    fn rank_best_and_tie_break() {
        let dm = dm_from_row(vec![0.05, 0.1, 0.5], 0);
        assert_eq!(rank_of_truth(&dm, 0).unwrap(), 1);

        // all equal: smallest id wins
        let dm = dm_from_row(vec![0.5, 0.5, 0.5], 0);
        assert_eq!(rank_of_truth(&dm, 0).unwrap(), 1);
        let dm = dm_from_row(vec![0.5, 0.5, 0.5], 2);
        assert_eq!(rank_of_truth(&dm, 0).unwrap(), 3);
    }

    #[test]
    fn metrics_hand_cases() {
        let m = metrics_from_ranks(&[1, 2, 3, 4]);
        assert_eq!(m.med_r, 2.5);
        assert_eq!(m.r1, 0.25);
        assert_eq!(m.r5, 1.0);

        let m = metrics_from_ranks(&[7]);
        assert_eq!(m.r5, 0.0);
        assert_eq!(m.r10, 1.0);
        assert_eq!(m.med_r, 7.0);
    }

    #[test]
    fn identity_corpus_is_perfect() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..4).map(|j| ((i * 7 + j * 3) as f64).sin()).collect())
            .collect();
        let dm = distance_matrix(&rows, &rows, ids(6), ids(6), (0..6).collect()).unwrap();
        let m = metrics(&dm).unwrap();
        assert_eq!(m.med_r, 1.0);
        assert_eq!(m.r1, 1.0);
    }

    /// Naive oracle: fully sort each row with the same tie-break and locate
    /// the truth.
    fn naive_rank(dm: &DistanceMatrix, q: usize) -> usize {
        let row = &dm.values[q * dm.n_candidates..(q + 1) * dm.n_candidates];
        let mut order: Vec<usize> = (0..dm.n_candidates).collect();
        order.sort_by(|&a, &b| {
            row[a]
                .partial_cmp(&row[b])
                .unwrap()
                .then_with(|| dm.candidate_ids[a].cmp(&dm.candidate_ids[b]))
        });
        order.iter().position(|&c| c == dm.truth[q]).unwrap() + 1
    }

    #[test]
    fn optimized_ranks_match_full_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..10 {
            let n = rng.gen_range(3..60);
            let d = rng.gen_range(2..6);
            let emb: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let emb2: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let dm = distance_matrix(&emb, &emb2, ids(n), ids(n), (0..n).collect()).unwrap();
            for q in 0..n {
                assert_eq!(
                    rank_of_truth(&dm, q).unwrap(),
                    naive_rank(&dm, q),
                    "trial {trial} query {q}"
                );
            }
        }
    }

    #[test]
    fn monotone_transform_leaves_ranks_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 20;
        let emb: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let emb2: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let dm = distance_matrix(&emb, &emb2, ids(n), ids(n), (0..n).collect()).unwrap();
        let mut warped = dm.clone();
        for v in warped.values.iter_mut() {
            *v = (*v * 3.0).exp(); // strictly increasing
        }
        for q in 0..n {
            assert_eq!(rank_of_truth(&dm, q).unwrap(), rank_of_truth(&warped, q).unwrap());
        }
        assert_eq!(metrics(&dm).unwrap(), metrics(&warped).unwrap());
    }

    fn toy_matrix(values: Vec<f64>, n: usize) -> DistanceMatrix {
        DistanceMatrix {
            n_queries: n,
            n_candidates: n,
            values,
            query_ids: ids(n),
            candidate_ids: ids(n),
            truth: (0..n).collect(),
        }
    }

    #[test]
    fn fusion_products_and_nesting() {
        let a = toy_matrix(vec![0.2, 0.8, 0.6, 0.4], 2);
        let b = toy_matrix(vec![0.5, 1.0, 1.0, 0.5], 2);
        let ones = toy_matrix(vec![1.0; 4], 2);

        // CAR passes the base matrix through untouched
        let car = fuse(FusionProtocol::Car, &a, None, None).unwrap();
        assert_eq!(car.values, a.values);

        // CAR+ multiplies elementwise
        let plus = fuse(FusionProtocol::CarPlus, &a, Some(&b), None).unwrap();
        assert!((plus.values[0] - 0.1).abs() < 1e-15);

        // CAR++ with an all-ones factor reduces to CAR+
        let plusplus = fuse(FusionProtocol::CarPlusPlus, &a, Some(&b), Some(&ones)).unwrap();
        assert_eq!(plusplus.values, plus.values);

        // factor order commutes
        let swapped = fuse(FusionProtocol::CarPlusPlus, &a, Some(&ones), Some(&b)).unwrap();
        assert_eq!(swapped.values, plusplus.values);

        // missing factor errors
        assert!(matches!(
            fuse(FusionProtocol::CarPlus, &a, None, None),
            Err(RetrievalError::MissingModality { .. })
        ));
    }

    fn random_split(n: usize, d: usize, seed: u64, with_aux: bool) -> SplitEmbeddings {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mk = || -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        SplitEmbeddings {
            ids: ids(n),
            image: mk(),
            recipe: mk(),
            description: with_aux.then(&mut mk),
            segments: with_aux.then(&mut mk),
        }
    }

    #[test]
    fn subset_protocol_deterministic_and_degenerate() {
        let emb = random_split(12, 4, 3, true);
        let a = subset_protocol(&emb, Direction::ImageToRecipe, FusionProtocol::Car, 8, 10, 42)
            .unwrap();
        let b = subset_protocol(&emb, Direction::ImageToRecipe, FusionProtocol::Car, 8, 10, 42)
            .unwrap();
        assert_eq!(a.per_subset, b.per_subset);

        // subset = corpus: all subsets identical, zero variance
        let full = subset_protocol(&emb, Direction::RecipeToImage, FusionProtocol::Car, 12, 10, 7)
            .unwrap();
        for m in &full.per_subset {
            assert_eq!(*m, full.per_subset[0]);
        }

        assert!(matches!(
            subset_protocol(&emb, Direction::ImageToRecipe, FusionProtocol::Car, 13, 2, 0),
            Err(RetrievalError::SubsetTooLarge { .. })
        ));
    }

    #[test]
    fn subset_metrics_match_brute_force_reranking() {
        let emb = random_split(30, 5, 11, true);
        for protocol in [FusionProtocol::Car, FusionProtocol::CarPlus, FusionProtocol::CarPlusPlus] {
            for direction in [Direction::ImageToRecipe, Direction::RecipeToImage] {
                let report = subset_protocol(&emb, direction, protocol, 20, 4, 1).unwrap();
                for (s, m) in report.per_subset.iter().enumerate() {
                    // reconstruct the same subset and re-rank naively
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
                    rng.set_stream(s as u64);
                    let mut indices: Vec<usize> = (0..30).collect();
                    indices.shuffle(&mut rng);
                    indices.truncate(20);
                    let dm = emb.fused_distances(&indices, direction, protocol).unwrap();
                    let ranks: Vec<usize> = (0..dm.n_queries).map(|q| naive_rank(&dm, q)).collect();
                    assert_eq!(*m, metrics_from_ranks(&ranks));
                }
            }
        }
    }

    #[test]
    fn missing_modalities_reported_by_name() {
        let emb = random_split(6, 3, 2, false);
        let err = subset_protocol(&emb, Direction::ImageToRecipe, FusionProtocol::CarPlusPlus, 4, 1, 0)
            .unwrap_err();
        assert!(err.to_string().contains("description"));
        let mut with_desc = random_split(6, 3, 2, true);
        with_desc.segments = None;
        let err = subset_protocol(&with_desc, Direction::ImageToRecipe, FusionProtocol::CarPlusPlus, 4, 1, 0)
            .unwrap_err();
        assert!(err.to_string().contains("segments"));
    }

    #[test]
    fn recall_ordering_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.gen_range(2..40);
            let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..50)).collect();
            let m = metrics_from_ranks(&ranks);
            assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
            assert!(m.med_r >= 1.0);
        }
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn monotone_invariance_property(
                seed in 0u64..500,
                scale in 0.1f64..4.0,
            ) {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let n = rng.gen_range(2..15);
                let emb: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let emb2: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let dm = distance_matrix(&emb, &emb2, ids(n), ids(n), (0..n).collect()).unwrap();
                let mut warped = dm.clone();
                for v in warped.values.iter_mut() {
                    *v = v.mul_add(scale, 0.0).tanh(); // strictly increasing on [0, 2]
                }
                prop_assert_eq!(metrics(&dm).unwrap(), metrics(&warped).unwrap());
            }
        }
    }
}
